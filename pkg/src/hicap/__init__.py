"""Compressive massive random access over sub-channelized FFT resources.

Monte-Carlo simulation of hierarchically sparse uplink activity, detection by
hierarchical hard thresholding, and the analytic bounds it is checked against.
"""
from .model import ConfigError, SystemConfig, derive_dimensions, select_ku

__version__ = "0.1.0"

__all__ = ["ConfigError", "SystemConfig", "derive_dimensions", "select_ku", "__version__"]
