"""Trial execution, sweeps and empirical checks of the analytic bounds."""
from __future__ import annotations

import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bounds
from .detect import TrialMetrics, detect_subchannel, evaluate_trial
from .measurement import SubsampledDftOperator, add_noise, simulate_uplink
from .model import (
    STREAM_ACTIVITY, STREAM_CHANNEL, STREAM_DATA, STREAM_NOISE, STREAM_PARTITION,
    SystemConfig, birthday_no_collision, derive_rng, draw_activity, draw_channels,
    draw_data,
)

log = logging.getLogger(__name__)

SWEEP_AXES = ("n", "snr_db", "t", "kbar_u")
METRICS = ("supported_users", "p_md", "p_fa", "symbol_error_rate", "detection_rate",
           "exact_recovery_rate", "noncollided_users", "measured_snr_db")


class TrialError(RuntimeError):
    pass


def worker_count(workers: int | None = None) -> int:
    """Explicit ``workers``, else ``HICAP_THREADS``, else 1."""
    if workers is None:
        workers = int(os.environ.get("HICAP_THREADS", "1") or 1)
    return max(1, int(workers))


def run_trial(config: SystemConfig, trial: int) -> tuple[TrialMetrics, float]:
    """One trial; returns the metrics and the mean noiseless power per measurement.

    Every random quantity comes from its own ``(seed, trial, stream)``
    generator, so trials that differ only in SNR share activity, channels,
    data and partition.
    """
    def rng(stream):
        return derive_rng(config.seed, trial, stream)

    activity = draw_activity(config, rng(STREAM_ACTIVITY))
    channels = draw_channels(activity, config, rng(STREAM_CHANNEL))
    data = draw_data(activity, config, rng(STREAM_DATA))
    Y, ops = simulate_uplink(config.evolve(snr_db=None), channels, data, rng(STREAM_PARTITION))
    power = float(np.mean(np.abs(Y) ** 2))
    if config.sigma2 > 0:
        Y = add_noise(Y, config.sigma2, config.n, rng(STREAM_NOISE))
    results = [detect_subchannel(A, Y[j], config) for j, A in enumerate(ops)]
    return evaluate_trial(activity, data, results, config.u), power


def _run_task(task):
    config, trial = task
    try:
        return run_trial(config, trial)
    except Exception as exc:  # re-raised with the point context by the caller
        return exc


@dataclass(frozen=True)
class ExperimentSpec:
    """Base scenario, an optional cartesian sweep and the trials per point."""

    base: SystemConfig
    sweep: tuple = ()
    trials: int = 100

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for axis, values in self.sweep:
            if axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {axis!r}")
            if not len(values):
                raise ValueError(f"sweep axis {axis!r} has no values")

    def points(self) -> list[SystemConfig]:
        if not self.sweep:
            return [self.base]
        names = [a for a, _ in self.sweep]
        return [self.base.evolve(**dict(zip(names, combo)))
                for combo in itertools.product(*(v for _, v in self.sweep))]


@dataclass
class PointResult:
    config: SystemConfig
    trials: int
    mean: dict
    std: dict
    wall_clock: float
    metrics: list = field(default_factory=list, repr=False)

    @property
    def noise_variance_per_measurement(self) -> float:
        return self.config.sigma2 / self.config.n


@dataclass
class AggregateResult:
    points: list[PointResult]

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


def _summarize(config: SystemConfig, outcomes) -> tuple[dict, dict]:
    rows = {k: [] for k in METRICS}
    noise = config.sigma2 / config.n
    for tm, power in outcomes:
        rows["supported_users"].append(tm.supported_users)
        rows["p_md"].append(tm.p_md)
        rows["p_fa"].append(tm.p_fa)
        rows["symbol_error_rate"].append(tm.symbol_error_rate)
        rows["detection_rate"].append(tm.detection_rate)
        rows["exact_recovery_rate"].append(tm.exact_recovery_rate)
        rows["noncollided_users"].append(tm.eligible_users)
        rows["measured_snr_db"].append(10 * math.log10(power / noise) if noise > 0 else math.inf)
    mean = {k: float(np.mean(v)) for k, v in rows.items()}
    std = {k: float(np.std(v)) if np.all(np.isfinite(v)) else 0.0 for k, v in rows.items()}
    return mean, std


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> AggregateResult:
    """Run every sweep point of ``spec``; the reduction is an ordered fold, so
    results do not depend on the worker count."""
    configs = spec.points()
    workers = worker_count(workers)
    tasks = [(cfg, k) for cfg in configs for k in range(spec.trials)]
    started = time.perf_counter()
    if workers == 1:
        outcomes = map(_run_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        outcomes = pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers)))
    points = []
    try:
        for i, cfg in enumerate(configs):
            t0 = time.perf_counter()
            batch = []
            for k in range(spec.trials):
                out = next(outcomes)
                if isinstance(out, Exception):
                    raise TrialError(f"sweep point {i} ({cfg}) failed in trial {k}: {out!r}") from out
                batch.append(out)
            mean, std = _summarize(cfg, batch)
            points.append(PointResult(cfg, spec.trials, mean, std,
                                      time.perf_counter() - t0, [tm for tm, _ in batch]))
            log.info("point n=%d snr=%s: supported %.1f, P_md %.3f", cfg.n, cfg.snr_db,
                     mean["supported_users"], mean["p_md"])
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    log.debug("experiment finished in %.2fs", time.perf_counter() - started)
    return AggregateResult(points)


def analytic_prediction(config: SystemConfig) -> float:
    """Served users per frame with error-free detection: ``(1 - p_coll) kbar_u c``."""
    return birthday_no_collision(config.kbar_u, config.u) * config.kbar_u * config.c


def devices_per_second(supported_per_frame: float, t: int,
                       subcarrier_spacing: float = 60e3) -> float:
    """Served users per second for frames of ``t`` OFDM symbols without cyclic prefix."""
    return supported_per_frame * subcarrier_spacing / t


def sweep_supported_users(base: SystemConfig, n_values=(1024, 2048, 4096, 8192),
                          snr_values=(None, 10.0, 0.0, -10.0), trials: int = 100,
                          workers: int | None = None) -> AggregateResult:
    """Mean supported users over ``n`` and SNR (``None`` is noise-free)."""
    spec = ExperimentSpec(base, (("n", tuple(n_values)), ("snr_db", tuple(snr_values))), trials)
    return run_experiment(spec, workers)


# ---------------------------------------------------------------------------
# empirical counterparts of the bounds

@dataclass
class TailRow:
    parameters: dict
    empirical: float
    stderr: float
    bound: float

    @property
    def dominated(self) -> bool:
        return self.empirical <= self.bound


def _random_hier_sparse(config: SystemConfig, rng: np.random.Generator):
    """Unit-norm vector with ``kbar_u`` distinct active blocks of ``k_s`` taps."""
    blocks = np.sort(rng.choice(config.u, size=config.kbar_u, replace=False))
    idx = np.concatenate([b * config.s + np.sort(rng.choice(config.s, config.k_s, replace=False))
                          for b in blocks])
    x = rng.standard_normal(len(idx)) + 1j * rng.standard_normal(len(idx))
    return idx, x / np.linalg.norm(x)


def concentration_deviations(config: SystemConfig, trials: int, rng: np.random.Generator,
                             modulation: str = "block") -> np.ndarray:
    """Relative deviations ``|t^-1 sum_i |A D_i x|^2 - |x|^2| / |x|^2``.

    ``x`` is drawn once; each trial draws fresh rows and fresh unit-modulus
    modulations, constant per block (``"block"``) or per entry (``"entry"``),
    with ``D_0 = I``.
    """
    if modulation not in ("block", "entry"):
        raise ValueError("modulation must be 'block' or 'entry'")
    idx, x = _random_hier_sparse(config, rng)
    n, m, t, s = config.n, config.m, config.t, config.s
    groups = np.unique(idx // s, return_inverse=True)[1]
    dev = np.empty(trials)
    for k in range(trials):
        A = SubsampledDftOperator(n, rng.choice(n, size=m, replace=False))
        cols = A.columns(idx)
        width = groups.max() + 1 if modulation == "block" else len(idx)
        phases = np.exp(2j * np.pi * rng.random((t, width)))
        phases[0] = 1.0
        D = phases[:, groups] if modulation == "block" else phases
        energy = np.sum(np.abs((D * x) @ cols.T) ** 2, axis=1)
        dev[k] = abs(energy.mean() - 1.0)
    return dev


def empirical_concentration(config: SystemConfig, trials: int, eps_grid,
                            rng: np.random.Generator | None = None,
                            modulation: str = "block") -> list[TailRow]:
    """Empirical tail of the slot-averaged energy next to the multi-slot bound."""
    if trials < 1000:
        raise ValueError("empirical_concentration needs at least 1000 trials")
    rng = rng if rng is not None else derive_rng(config.seed, 0, 100)
    dev = concentration_deviations(config, trials, rng, modulation)
    rows = []
    for eps in eps_grid:
        p = float(np.mean(dev > eps))
        rows.append(TailRow(
            {"m": config.m, "t": config.t, "eps": eps},
            p, math.sqrt(p * (1 - p) / trials),
            bounds.conc_bound_multislot(config.m, config.k_s, config.kbar_u, config.t, eps),
        ))
    return rows


def subchannel_loads(n: int, m: int, k_u: int, trials: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Load of sub-channel 0 when ``k_u`` users each pick one of ``n // m`` uniformly."""
    c = n // m
    loads = np.empty(trials, dtype=np.int64)
    chunk = max(1, 5_000_000 // max(k_u, 1))
    for lo in range(0, trials, chunk):
        size = min(chunk, trials - lo)
        loads[lo:lo + size] = np.sum(rng.integers(0, c, size=(size, k_u)) == 0, axis=1)
    return loads


def empirical_load_distribution(n: int, m: int, k_u: int, trials: int,
                                rng: np.random.Generator | None = None,
                                x_values=None) -> list[TailRow]:
    """Empirical ``P(load >= x)`` of one sub-channel next to the capture bound."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if rng is not None else derive_rng(0, 0, 101)
    loads = subchannel_loads(n, m, k_u, trials, rng)
    if x_values is None:
        x_values = range(1, k_u)
    rows = []
    for x in x_values:
        p = float(np.mean(loads >= x))
        rows.append(TailRow({"n": n, "m": m, "k_u": k_u, "x": int(x)}, p,
                            math.sqrt(p * (1 - p) / trials),
                            bounds.capture_bound(n, k_u, x)))
    return rows


def noncollided_counts(c: int, u: int, k_u: int, trials: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Users alone on their (sub-channel, block) when ``k_u`` users pick uniformly
    among ``c * u`` resources."""
    picks = np.sort(rng.integers(0, c * u, size=(trials, k_u)), axis=1)
    same_prev = np.zeros_like(picks, dtype=bool)
    same_prev[:, 1:] = picks[:, 1:] == picks[:, :-1]
    same_next = np.zeros_like(same_prev)
    same_next[:, :-1] = same_prev[:, 1:]
    return np.sum(~(same_prev | same_next), axis=1)


def empirical_noncollided(config: SystemConfig, k_u: int, trials: int,
                          rng: np.random.Generator | None = None) -> TailRow:
    """Mean non-collided count versus ``bounds.expected_noncollided``."""
    rng = rng if rng is not None else derive_rng(config.seed, 0, 102)
    counts = noncollided_counts(config.c, config.u, k_u, trials, rng)
    return TailRow({"k_u": k_u, "c": config.c, "n": config.n, "u": config.u},
                   float(counts.mean()), float(counts.std(ddof=1) / math.sqrt(trials)),
                   bounds.expected_noncollided(k_u, config.k_s, config.c, config.n))
