"""Self-checks: operator identities, thresholding oracle, bound dominance."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import bounds
from .detect import brute_force_threshold, hier_threshold
from .measurement import SubsampledDftOperator, apply_adjoint, apply_operator
from .model import SystemConfig, derive_rng
from .montecarlo import empirical_concentration, empirical_load_distribution

CONC_M = (16, 64)
CONC_T = (1, 10, 100)
CONC_EPS = (0.25, 0.5, 1.0)
LOAD_KU = (128, 256, 512)


@dataclass
class CheckRow:
    check_name: str
    parameters: dict
    empirical: float
    bound: float
    passed: bool

    @property
    def parameter_string(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.parameters.items())


def _crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def adjoint_error(n, m, pairs, rng, scale=None) -> float:
    worst = 0.0
    for _ in range(pairs):
        A = SubsampledDftOperator(n, rng.choice(n, m, replace=False), scale)
        x, y = _crandn(rng, n), _crandn(rng, m)
        lhs = np.vdot(y, apply_operator(A, x, "fft"))
        rhs = np.vdot(apply_adjoint(A, y), x)
        worst = max(worst, abs(lhs - rhs))
    return worst


def isometry_mean(n, m, draws, rng, scale=None) -> float:
    """Mean of ``|Ax|^2`` over random row sets for one random unit ``x``."""
    x = _crandn(rng, n)
    x /= np.linalg.norm(x)
    total = 0.0
    for _ in range(draws):
        A = SubsampledDftOperator(n, rng.choice(n, m, replace=False), scale)
        total += float(np.sum(np.abs(apply_operator(A, x, "fft")) ** 2))
    return total / draws


def sparse_dense_error(n, m, k, trials, rng, scale=None) -> float:
    worst = 0.0
    for _ in range(trials):
        A = SubsampledDftOperator(n, rng.choice(n, m, replace=False), scale)
        x = np.zeros(n, dtype=complex)
        x[rng.choice(n, k, replace=False)] = _crandn(rng, k)
        a = apply_operator(A, x, "sparse")
        b = apply_operator(A, x, "fft")
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    return worst


def threshold_mismatches(u, s, k_u, k_s, instances, rng) -> int:
    bad = 0
    for _ in range(instances):
        g = rng.random(u * s)
        a = hier_threshold(g, k_u, k_s, u, s)
        b = brute_force_threshold(g, k_u, k_s, u, s)
        bad += not (np.array_equal(a.blocks, b.blocks) and a.inblock == b.inblock)
    return bad


def threshold_grid(max_dim=4, max_sparsity=2):
    for u, s in itertools.product(range(1, max_dim + 1), repeat=2):
        for k_u, k_s in itertools.product(range(1, min(u, max_sparsity) + 1),
                                          range(1, min(s, max_sparsity) + 1)):
            yield u, s, k_u, k_s


def run_validation(config: SystemConfig, trials: int = 2000, load_trials: int = 100_000,
                   oracle_instances: int = 1000, operator_scale: float | None = None,
                   ) -> tuple[list[CheckRow], dict]:
    """Run the whole suite; returns the check rows and the raw tail tables."""
    if trials < 1000:
        raise ValueError("validation needs at least 1000 concentration trials")
    if load_trials < 1 or oracle_instances < 1:
        raise ValueError("trial counts must be positive")
    rng = derive_rng(config.seed, 0, 200)
    n, m = config.n, config.m
    rows = []

    err = adjoint_error(n, m, 100, rng, operator_scale)
    rows.append(CheckRow("adjoint_identity", {"n": n, "m": m, "pairs": 100}, err, 1e-9, err <= 1e-9))
    mean = isometry_mean(n, m, 10_000, rng, operator_scale)
    rows.append(CheckRow("isometry_in_expectation", {"n": n, "m": m, "draws": 10_000},
                         abs(mean - 1.0), 0.02, abs(mean - 1.0) <= 0.02))
    err = sparse_dense_error(n, m, config.kbar_u * config.k_s, 100, rng, operator_scale)
    rows.append(CheckRow("sparse_dense_agreement", {"n": n, "m": m}, err, 1e-9, err <= 1e-9))

    for u, s, k_u, k_s in threshold_grid():
        bad = threshold_mismatches(u, s, k_u, k_s, oracle_instances, rng)
        rows.append(CheckRow("threshold_oracle", {"u": u, "s": s, "k_u": k_u, "k_s": k_s,
                                                  "instances": oracle_instances},
                             bad, 0, bad == 0))

    conc = []
    for mm, t in itertools.product(CONC_M, CONC_T):
        cfg = config.evolve(m=mm, t=t)
        table = empirical_concentration(cfg, trials, CONC_EPS, derive_rng(config.seed, mm, t, 201))
        conc.extend(table)
        for r in table:
            rows.append(CheckRow("concentration_dominance", r.parameters, r.empirical,
                                 r.bound, r.dominated))
    for mm, t, eps in itertools.product(CONC_M, CONC_T, CONC_EPS):
        args = (mm, config.k_s, config.kbar_u)
        ratio = (bounds.conc_bound_multislot(*args, 2 * t, eps, clamp=False)
                 / bounds.conc_bound_multislot(*args, t, eps, clamp=False))
        rows.append(CheckRow("concentration_t_decay", {"m": mm, "t": t, "eps": eps},
                             ratio, 0.5, ratio == 0.5))

    load = []
    for k_u in LOAD_KU:
        table = empirical_load_distribution(1024, 16, k_u, load_trials,
                                            derive_rng(config.seed, k_u, 202))
        load.extend(table)
        for r in table:
            rows.append(CheckRow("capture_dominance", r.parameters, r.empirical, r.bound,
                                 r.dominated))
    return rows, {"concentration": conc, "load": load}
