"""Hierarchical support recovery, activity decisions and per-trial scoring."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measurement import SubsampledDftOperator, apply_adjoint
from .model import QPSK, ActivityPattern, ConfigError, DataSymbols, SystemConfig

BRUTE_FORCE_LIMIT = 10**6
RIDGE = 1e-12
RANK_TOL = 1e-10


class RankDeficientError(ValueError):
    """Least-squares support has more columns than measurements."""


@dataclass
class SupportEstimate:
    """Selected blocks (ascending), their in-block indices and all block scores."""

    blocks: np.ndarray
    inblock: dict
    scores: np.ndarray
    s: int
    degenerate: bool = False
    iterations: int = 1

    @property
    def indices(self) -> np.ndarray:
        idx = [b * self.s + np.asarray(self.inblock[b], dtype=int) for b in self.blocks]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def same_support(self, other: "SupportEstimate") -> bool:
        return np.array_equal(self.indices, other.indices)


def block_scores(adjoint_images) -> np.ndarray:
    """Slot-averaged energy ``g_l = mean_i |(A^H y_i)_l|^2`` of ``(t, n)`` images."""
    z = np.atleast_2d(np.asarray(adjoint_images))
    return np.mean(np.abs(z) ** 2, axis=0)


def correlation_energies(A: SubsampledDftOperator, Y) -> np.ndarray:
    """Same as ``block_scores(apply_adjoint(A, Y))`` without forming the images.

    ``g`` is a quadratic form in the slot covariance ``R = sum_i y_i y_i^H``,
    so one length-``n`` inverse FFT over the row-difference co-array suffices.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=complex))
    t = Y.shape[0]
    R = Y.T @ Y.conj()
    lag = ((A.rows[:, None] - A.rows[None, :]) % A.n).ravel()
    w = (np.bincount(lag, weights=R.real.ravel(), minlength=A.n)
         + 1j * np.bincount(lag, weights=R.imag.ravel(), minlength=A.n))
    g = (abs(A.scale) ** 2 * A.n / t) * np.fft.ifft(w).real
    return np.maximum(g, 0.0)


def _check_dims(g, k_u, k_s, u, s):
    if k_s > s or k_u > u or k_s < 1 or k_u < 1:
        raise ConfigError(f"need 1 <= k_u <= u and 1 <= k_s <= s "
                          f"(k_u={k_u}, u={u}, k_s={k_s}, s={s})")
    g = np.asarray(g, dtype=float)
    if g.shape != (u * s,):
        raise ConfigError(f"energy vector has shape {g.shape}, expected ({u * s},)")
    return g.reshape(u, s)


def hier_threshold(g, k_u: int, k_s: int, u: int, s: int) -> SupportEstimate:
    """Support of the best ``(k_u, k_s)``-hierarchically sparse approximation.

    Keeps the ``k_s`` largest entries in every block, then the ``k_u`` blocks
    with the largest retained energy.  Ties go to the lowest index.
    """
    G = _check_dims(g, k_u, k_s, u, s)
    order = np.argsort(-G, axis=1, kind="stable")[:, :k_s]
    scores = np.take_along_axis(G, order, axis=1).sum(axis=1)
    ranking = np.argsort(-scores, kind="stable")
    chosen = np.sort(ranking[:k_u])
    degenerate = k_u < u and scores[ranking[k_u - 1]] == scores[ranking[k_u]]
    inblock = {int(b): tuple(sorted(int(i) for i in order[b])) for b in chosen}
    return SupportEstimate(chosen, inblock, scores, s, degenerate=bool(degenerate))


def brute_force_threshold(g, k_u: int, k_s: int, u: int, s: int) -> SupportEstimate:
    """Exhaustive search over all hierarchical supports (test oracle).

    Among the maximizers the lexicographically smallest ``(blocks, subsets)``
    is returned, which is the same tie-break as :func:`hier_threshold`.
    """
    G = _check_dims(g, k_u, k_s, u, s)
    size = math.comb(u, k_u) * math.comb(s, k_s) ** k_u
    if size > BRUTE_FORCE_LIMIT:
        raise ValueError(f"instance too large for exhaustive search ({size} supports)")
    subsets = list(itertools.combinations(range(s), k_s))
    best, best_key = -math.inf, None
    for blocks in itertools.combinations(range(u), k_u):
        for choice in itertools.product(subsets, repeat=k_u):
            total = math.fsum(G[b, i] for b, sub in zip(blocks, choice) for i in sub)
            if total > best:
                best, best_key = total, (blocks, choice)
    blocks, choice = best_key
    scores = np.array([math.fsum(sorted(row, reverse=True)[:k_s]) for row in G])
    return SupportEstimate(np.array(blocks), {b: sub for b, sub in zip(blocks, choice)},
                           scores, s)


def activity_decision(support: SupportEstimate, mode: str = "topk",
                      xi: float = 0.0) -> np.ndarray:
    """Blocks declared active.

    ``topk`` accepts every selected block.  ``threshold`` accepts a block when
    its captured energy summed over the ``t`` slots reaches ``t * xi``, i.e.
    when its slot-averaged score is at least ``xi`` (and positive).
    """
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    if mode == "topk":
        return support.blocks.copy()
    if mode == "threshold":
        sc = support.scores[support.blocks]
        return support.blocks[(sc >= xi) & (sc > 0)]
    raise ValueError(f"unknown detector mode {mode!r}")


def _least_squares(M: np.ndarray, B: np.ndarray, min_norm: bool) -> np.ndarray:
    rows, cols = M.shape
    if cols > rows and not min_norm:
        raise RankDeficientError(f"support of size {cols} exceeds {rows} measurements")
    if cols == 0:
        return np.zeros((0,) + B.shape[1:], dtype=complex)
    wide = cols > rows
    # thin QR of M (tall) or of M^H (wide, minimum-norm solution)
    Q, R = np.linalg.qr(M.conj().T if wide else M)
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_TOL * max(diag.max(), np.finfo(float).tiny):
        warnings.warn("singular Gram matrix, solving with ridge regularization",
                      RuntimeWarning, stacklevel=3)
        if wide:
            return M.conj().T @ np.linalg.solve(M @ M.conj().T + RIDGE * np.eye(rows), B)
        return np.linalg.solve(M.conj().T @ M + RIDGE * np.eye(cols), M.conj().T @ B)
    if wide:
        return Q @ np.linalg.solve(R.conj().T, B)
    return np.linalg.solve(R, Q.conj().T @ B)


def estimate_channel(A: SubsampledDftOperator, y0, support_idx,
                     min_norm: bool = False) -> np.ndarray:
    """Least-squares channel on ``support_idx`` from the pilot observation.

    Returns the coefficients aligned with ``support_idx``.  Supports larger
    than ``m`` raise :class:`RankDeficientError` unless ``min_norm`` asks for
    the minimum-norm solution.
    """
    S = np.asarray(support_idx, dtype=int)
    return _least_squares(A.columns(S), np.asarray(y0, dtype=complex), min_norm)


def qpsk_decide(z) -> np.ndarray:
    """Nearest QPSK point; NaN inputs stay NaN (erasures)."""
    z = np.asarray(z, dtype=complex)
    quadrant = np.where(z.imag >= 0, np.where(z.real >= 0, 0, 1), np.where(z.real < 0, 2, 3))
    return np.where(np.isnan(z), np.nan + 0j, QPSK[quadrant])


def estimate_data(A: SubsampledDftOperator, Y_data, support_idx, h_hat, s: int,
                  min_norm: bool = False):
    """QPSK decisions per detected block and data slot.

    Each slot is solved by least squares on the support; a block's symbol is
    the nearest QPSK point to ``<h_k, v_k> / |h_k|^2``.  Blocks whose channel
    estimate is zero are erased (NaN).

    Returns ``(blocks, decisions)`` with ``decisions.shape == (t - 1, len(blocks))``.
    """
    S = np.asarray(support_idx, dtype=int)
    Y_data = np.atleast_2d(np.asarray(Y_data, dtype=complex))
    blocks = np.unique(S // s)
    if Y_data.shape[0] == 0 or len(blocks) == 0:
        return blocks, np.zeros((Y_data.shape[0], len(blocks)), dtype=complex)
    V = _least_squares(A.columns(S), Y_data.T, min_norm).T
    h_hat = np.asarray(h_hat, dtype=complex)
    raw = np.empty((Y_data.shape[0], len(blocks)), dtype=complex)
    for col, b in enumerate(blocks):
        grp = S // s == b
        energy = float(np.vdot(h_hat[grp], h_hat[grp]).real)
        if energy == 0:
            raw[:, col] = np.nan
        else:
            raw[:, col] = V[:, grp] @ h_hat[grp].conj() / energy
    return blocks, qpsk_decide(raw)


def _select_indices(support: SupportEstimate, blocks) -> np.ndarray:
    idx = [b * support.s + np.asarray(support.inblock[int(b)], dtype=int) for b in blocks]
    return np.concatenate(idx) if idx else np.zeros(0, dtype=int)


def hiiht_iterate(A: SubsampledDftOperator, Y, k_u: int, k_s: int, u: int, s: int,
                  iterations: int = 1) -> SupportEstimate:
    """Hierarchical IHT on the multi-slot observation ``Y`` of shape ``(t, m)``.

    The first pass thresholds the correlation energies.  Later passes fit
    per-slot coefficients on the current support, re-encode them, add the
    adjoint of the residual and threshold again, stopping early once the
    support is unchanged.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    Y = np.atleast_2d(np.asarray(Y, dtype=complex))
    support = hier_threshold(correlation_energies(A, Y), k_u, k_s, u, s)
    for it in range(2, iterations + 1):
        S = support.indices
        AS = A.columns(S)
        coef = _least_squares(AS, Y.T, min_norm=True)  # (|S|, t)
        Z = apply_adjoint(A, Y - (AS @ coef).T)
        Z[:, S] += coef.T
        new = hier_threshold(block_scores(Z), k_u, k_s, u, s)
        new.iterations = it
        if new.same_support(support):
            return new
        support = new
    return support


@dataclass
class SubchannelResult:
    support: SupportEstimate
    active_blocks: np.ndarray
    data_blocks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    decisions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=complex))


def detect_subchannel(A: SubsampledDftOperator, Yj, config: SystemConfig) -> SubchannelResult:
    """Support recovery, activity decision and data demodulation for one sub-channel."""
    support = hiiht_iterate(A, Yj, config.kbar_u, config.k_s, config.u, config.s,
                            config.iterations)
    active = activity_decision(support, config.detector_mode, config.xi)
    result = SubchannelResult(support, active)
    if config.t > 1 and len(active):
        S = _select_indices(support, active)
        min_norm = len(S) > A.m
        h_hat = estimate_channel(A, Yj[0], S, min_norm=min_norm)
        result.data_blocks, result.decisions = estimate_data(
            A, Yj[1:], S, h_hat, config.s, min_norm=min_norm)
    return result


@dataclass
class TrialMetrics:
    """Detection outcome of one trial, summed over sub-channels.

    Missed detections count only users alone on their block; collided users
    are left out of the miss-rate denominator and are never counted as
    supported.  Symbol errors are counted over the data slots of supported
    users, with erasures counted as errors.
    """

    active_users: int = 0
    eligible_users: int = 0
    missed_detections: int = 0
    false_alarms: int = 0
    inactive_blocks: int = 0
    symbol_errors: int = 0
    symbols: int = 0
    supported_users: int = 0
    subchannels: int = 0
    exact_recoveries: int = 0

    @property
    def p_md(self) -> float:
        return self.missed_detections / self.eligible_users if self.eligible_users else 0.0

    @property
    def p_fa(self) -> float:
        return self.false_alarms / self.inactive_blocks if self.inactive_blocks else 0.0

    @property
    def symbol_error_rate(self) -> float:
        return self.symbol_errors / self.symbols if self.symbols else 0.0

    @property
    def detection_rate(self) -> float:
        return 1.0 - self.p_md if self.eligible_users else 1.0

    @property
    def exact_recovery_rate(self) -> float:
        return self.exact_recoveries / self.subchannels if self.subchannels else 0.0


def evaluate_trial(activity: ActivityPattern, data: DataSymbols,
                   results: list[SubchannelResult], u: int) -> TrialMetrics:
    tm = TrialMetrics()
    for j, (sc, res) in enumerate(zip(activity.subchannels, results)):
        declared = set(int(b) for b in res.active_blocks)
        true_blocks = set(int(b) for b in sc.active_blocks)
        alone = sc.noncollided
        tm.subchannels += 1
        tm.active_users += sc.load
        tm.eligible_users += int(alone.sum())
        tm.inactive_blocks += u - len(true_blocks)
        tm.false_alarms += len(declared - true_blocks)
        tm.exact_recoveries += declared == true_blocks
        for b in sc.blocks[alone]:
            b = int(b)
            if b not in declared:
                tm.missed_detections += 1
                continue
            tm.supported_users += 1
            if res.decisions.shape[0]:
                truth = data.symbols[j][:, np.searchsorted(data.blocks[j], b)]
                dec = res.decisions[:, np.searchsorted(res.data_blocks, b)]
                tm.symbols += len(truth)
                tm.symbol_errors += int(np.sum(~np.isclose(dec, truth)))
    return tm
