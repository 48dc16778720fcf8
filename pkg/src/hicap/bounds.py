"""Closed-form tail and capacity expressions for comparison with simulation.

Every probability bound is clamped to ``[0, 1]`` unless ``clamp=False`` is
passed, in which case the raw expression is returned.  Logarithms are natural.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


def _clamp(v: float, clamp: bool) -> float:
    return min(1.0, max(0.0, v)) if clamp else v


def _positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


def conc_bound_standard(k, m, eps, clamp=True):
    """Single-slot concentration of ``|Ax|^2`` for a ``k``-sparse ``x``."""
    _positive(k=k, m=m, eps=eps)
    if k > m:
        warnings.warn(f"sparsity k={k} exceeds m={m}", RuntimeWarning, stacklevel=2)
    rate = eps**2 * m / (2 * k) / (1 + 2 * math.sqrt(k / m) + eps / 3)
    return _clamp(2 * math.exp(-rate), clamp)


def conc_bound_multislot(m, k_s, k_u, t, eps, clamp=True):
    """Tail of the slot-averaged energy ``t^-1 sum_i |A D_i x|^2``; decays as ``1/t``."""
    _positive(m=m, k_s=k_s, k_u=k_u, t=t, eps=eps)
    raw = (32 * math.log(2 * m * k_s**2 * k_u**2) + 1) / (eps**2 * t * m)
    return _clamp(raw, clamp)


@dataclass(frozen=True)
class BoundInputs:
    """Scenario quantities shared by the missed-detection bound."""

    n: int = 1024
    s: int = 8
    k_s: int = 4
    m: int = 16
    t: int = 100
    snr_db: float | None = None
    C1: float = 1.0
    C2: float = 1.0
    h_min: float | None = None  # None: 1/x at the load being bounded

    def __post_init__(self):
        _positive(n=self.n, s=self.s, k_s=self.k_s, m=self.m, t=self.t,
                  C1=self.C1, C2=self.C2)
        if self.h_min is not None:
            _positive(h_min=self.h_min)

    @property
    def u(self) -> int:
        return self.n // self.s

    @property
    def sigma2(self) -> float:
        return 0.0 if self.snr_db is None else 10.0 ** (-self.snr_db / 10.0)


def estimate_fz(threshold, inputs: BoundInputs, rng: np.random.Generator,
                draws: int = 10_000, h_min: float = 1.0) -> float:
    """Monte-Carlo estimate of ``P(mean_i |(h + z_i)_A|^2 <= threshold)``.

    ``h`` has ``k_s`` taps with energy exactly ``h_min`` and ``z_i`` is the
    per-slot noise on those taps, variance ``sigma2 / n`` per entry.  Summed
    over the ``t`` slots the energy is a scaled noncentral chi-square with
    ``2 k_s t`` degrees of freedom, which is sampled directly.
    """
    _positive(h_min=h_min, draws=draws)
    k_s, t = inputs.k_s, inputs.t
    if inputs.sigma2 == 0:
        return float(h_min <= threshold)
    half_var = inputs.sigma2 / inputs.n / 2
    chi2 = rng.noncentral_chisquare(2 * k_s * t, t * h_min / half_var, size=draws)
    energy = half_var * chi2 / t
    return float(np.mean(energy <= threshold))


def pmd_bound(xi, x, eps, inputs: BoundInputs, rng: np.random.Generator | None = None,
              draws: int = 10_000, clamp=True):
    """Missed-detection bound at fixed sub-channel load ``x``.

    Sum of the noisy-energy CDF at ``xi + eps`` (estimated by simulation for
    a channel of energy ``h_min``, by default ``1/x``), a concentration term
    decaying in ``t`` and a noise term in ``SNR / n``.
    """
    _positive(eps=eps)
    if x < 1:
        raise ValueError("load x must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    k_s, s, m, t = inputs.k_s, inputs.s, inputs.m, inputs.t
    h_min = inputs.h_min if inputs.h_min is not None else 1.0 / x
    fz = estimate_fz(xi + eps, inputs, rng, draws, h_min)
    conc = (inputs.C1 * inputs.u * (math.e * s / k_s) ** k_s
            * (k_s**2 * math.log(2 * m * k_s**2 * x**2) + 1) / (eps**2 * t * m))
    if inputs.sigma2 == 0:
        noise = 0.0
    else:
        try:
            noise = inputs.C2 * math.pow(1.0 / inputs.sigma2 / inputs.n, -k_s * x)
        except OverflowError:
            noise = math.inf
    return _clamp(fz + conc + noise, clamp)


def capture_bound(n, k_u, x, clamp=True):
    """Tail of the load of one sub-channel (sparsity capture).

    Defined for ``1 <= x < k_u <= n``; for ``x >= k_u`` the prefactor is
    nonpositive and 0 is returned with a warning.
    """
    _positive(n=n, k_u=k_u, x=x)
    if k_u > n:
        raise ValueError("k_u must not exceed n")
    if x >= k_u:
        warnings.warn(f"x={x} >= k_u={k_u}: bound is vacuous, returning 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    raw = n * (k_u - x) / (x * math.sqrt(2 * math.pi * x)) * math.exp(-(1 - k_u / n) ** 2 * x)
    return _clamp(raw, clamp)


def expected_noncollided(k_u, k_s, c, n):
    """Lower bound ``k_u - k_u^2 k_s / (c n)`` on the mean non-collided count."""
    _positive(k_u=k_u, k_s=k_s, c=c, n=n)
    return k_u - k_u * (k_u * k_s) / (c * n)


def supported_users(p_u, kbar_u, c, p_md):
    """Expected users served per frame, ``(1 - p_u) kbar_u c (1 - P_md)``."""
    for name, p in (("p_u", p_u), ("p_md", p_md)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    return (1 - p_u) * kbar_u * c * (1 - p_md)
