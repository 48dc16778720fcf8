"""Subsampled DFT operators and synthesis of multi-slot observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DataSymbols, HierSparseSignal, SystemConfig


@dataclass(frozen=True)
class SubsampledDftOperator:
    """``m`` rows of the ``n``-point DFT, entries ``scale * exp(-2j*pi*r*k/n)``.

    The default scale ``1/sqrt(m)`` makes the operator an isometry in
    expectation over uniformly drawn rows.
    """

    n: int
    rows: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 1 or len(np.unique(rows)) != len(rows):
            raise ValueError("rows must be a 1-d array of distinct indices")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n):
            raise ValueError("row index out of range")
        object.__setattr__(self, "rows", rows)
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(len(rows)))

    @property
    def m(self) -> int:
        return len(self.rows)

    def columns(self, idx) -> np.ndarray:
        """Dense ``m x len(idx)`` submatrix."""
        idx = np.asarray(idx, dtype=np.int64)
        phase = np.outer(self.rows, idx) % self.n
        return self.scale * np.exp(-2j * np.pi * phase / self.n)

    def matrix(self) -> np.ndarray:
        return self.columns(np.arange(self.n))


def make_partition(n: int, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random permutation of ``range(n)`` cut into ``n // m`` chunks of size ``m``."""
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    perm = rng.permutation(n)
    return [perm[j * m:(j + 1) * m] for j in range(n // m)]


def _check_length(x: np.ndarray, size: int, what: str):
    if x.shape[-1] != size:
        raise ValueError(f"{what} has trailing dimension {x.shape[-1]}, expected {size}")


def apply_operator(A: SubsampledDftOperator, x, method: str = "auto") -> np.ndarray:
    """``A @ x`` along the last axis.

    ``method="sparse"`` evaluates the DFT sum over the nonzeros of ``x`` only,
    ``"fft"`` takes a full ``n``-point FFT and keeps the selected rows.
    ``"auto"`` picks sparse when the support is small.
    """
    x = np.asarray(x, dtype=complex)
    _check_length(x, A.n, "x")
    if method == "auto":
        nnz = np.count_nonzero(np.any(x.reshape(-1, A.n) != 0, axis=0))
        method = "sparse" if nnz * A.m < A.n * np.log2(max(A.n, 2)) else "fft"
    if method == "fft":
        return A.scale * np.fft.fft(x, axis=-1)[..., A.rows]
    if method == "sparse":
        idx = np.flatnonzero(np.any(x.reshape(-1, A.n) != 0, axis=0))
        return x[..., idx] @ A.columns(idx).T
    raise ValueError(f"unknown method {method!r}")


def apply_adjoint(A: SubsampledDftOperator, y) -> np.ndarray:
    """``A^H @ y`` along the last axis (the correlation detector)."""
    y = np.asarray(y, dtype=complex)
    _check_length(y, A.m, "y")
    z = np.zeros(y.shape[:-1] + (A.n,), dtype=complex)
    z[..., A.rows] = y
    return np.conj(A.scale) * A.n * np.fft.ifft(z, axis=-1)


def modulate(x, symbols) -> np.ndarray:
    """Multiply every entry of block ``k`` by ``symbols[k]``."""
    values = x.values if isinstance(x, HierSparseSignal) else np.asarray(x)
    symbols = np.asarray(symbols)
    if len(values) % len(symbols):
        raise ValueError("signal length is not a multiple of the block count")
    return values * np.repeat(symbols, len(values) // len(symbols))


def add_noise(y, sigma2: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise with variance ``sigma2 / n`` per entry."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    y = np.asarray(y, dtype=complex)
    if sigma2 == 0:
        return y.copy()
    std = np.sqrt(sigma2 / n / 2)
    return y + std * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))


def slot_signals(signal: HierSparseSignal, blocks: np.ndarray, symbols: np.ndarray,
                 t: int) -> tuple[np.ndarray, np.ndarray]:
    """Support indices and the ``(t, |S|)`` values of ``D_i h`` on that support."""
    S = signal.support
    xs = signal.values[S]
    X = np.tile(xs, (t, 1))
    if t > 1 and len(S):
        pos = np.searchsorted(blocks, S // signal.s)
        X[1:] *= symbols[:, pos]
    return S, X


def simulate_uplink(config: SystemConfig, channels: list[HierSparseSignal],
                    data: DataSymbols, rng_partition: np.random.Generator,
                    rng_noise: np.random.Generator | None = None,
                    operators: list[SubsampledDftOperator] | None = None):
    """Observations ``y[j, i] = A_j D_i h^j + z`` of shape ``(c, t, m)``.

    The pilot slot ``i = 0`` is unmodulated.  Returns the tensor together with
    the per-sub-channel operators.
    """
    c, t, m = config.c, config.t, config.m
    if operators is None:
        operators = [SubsampledDftOperator(config.n, rows)
                     for rows in make_partition(config.n, m, rng_partition)]
    if len(channels) != c or len(operators) != c:
        raise ValueError("channels and operators must have one entry per sub-channel")
    Y = np.zeros((c, t, m), dtype=complex)
    for j, (A, h) in enumerate(zip(operators, channels)):
        S, X = slot_signals(h, data.blocks[j], data.symbols[j], t)
        if len(S):
            Y[j] = X @ A.columns(S).T
    if config.sigma2 > 0:
        if rng_noise is None:
            raise ValueError("a noise generator is required when sigma2 > 0")
        Y = add_noise(Y, config.sigma2, config.n, rng_noise)
    return Y, operators
