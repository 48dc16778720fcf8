import warnings

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from hicap.detect import (
    RankDeficientError, SubchannelResult, activity_decision, block_scores,
    brute_force_threshold, correlation_energies, detect_subchannel, estimate_channel,
    estimate_data, evaluate_trial, hier_threshold, hiiht_iterate, qpsk_decide,
)
from hicap.measurement import SubsampledDftOperator, apply_adjoint, apply_operator, simulate_uplink
from hicap.model import (
    QPSK, ActivityPattern, ConfigError, SubchannelActivity, SystemConfig,
    derive_rng, draw_activity, draw_channels, draw_data,
)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def hier_instance(rng, n=256, s=8, k_u=2, k_s=2):
    blocks = np.sort(rng.choice(n // s, k_u, replace=False))
    idx = np.concatenate([b * s + np.sort(rng.choice(s, k_s, replace=False)) for b in blocks])
    x = np.zeros(n, complex)
    x[idx] = crandn(rng, len(idx))
    return idx, x


def observe(A, x, s, t, rng):
    d = np.exp(2j * np.pi * rng.random((t, A.n // s)))
    d[0] = 1
    return np.stack([apply_operator(A, x * np.repeat(d[i], s)) for i in range(t)]), d


# --- scores ------------------------------------------------------------------------

def test_block_scores_examples():
    assert not np.any(block_scores(np.zeros((3, 16))))
    e5 = np.zeros(16)
    e5[5] = 1
    assert np.array_equal(block_scores(e5), e5)


def test_scores_full_dft_equal_coefficient_energy():
    rng = derive_rng(1)
    idx, x = hier_instance(rng, n=64)
    A = SubsampledDftOperator(64, rng.permutation(64))
    Y, _ = observe(A, x, 8, 5, rng)
    assert np.allclose(block_scores(apply_adjoint(A, Y)), np.abs(x) ** 2, atol=1e-12)


@given(st.integers(0, 2**32), st.integers(1, 12), st.sampled_from([(64, 8), (256, 16), (128, 128)]))
def test_correlation_energies_match_images(seed, t, dims):
    n, m = dims
    rng = derive_rng(seed)
    A = SubsampledDftOperator(n, rng.choice(n, m, replace=False))
    Y = crandn(rng, t, m)
    assert np.allclose(correlation_energies(A, Y), block_scores(apply_adjoint(A, Y)),
                       rtol=1e-9, atol=1e-12)


# --- thresholding --------------------------------------------------------------------

def test_threshold_zero_energy_is_degenerate():
    est = hier_threshold(np.zeros(12), 2, 2, 4, 3)
    assert est.blocks.tolist() == [0, 1]
    assert est.inblock == {0: (0, 1), 1: (0, 1)}
    assert est.degenerate


def test_threshold_small_example():
    est = hier_threshold(np.array([0.1, 0.9, 0.5, 0.2]), 1, 1, 2, 2)
    assert est.blocks.tolist() == [0] and est.inblock == {0: (1,)}
    assert est.indices.tolist() == [1] and not est.degenerate


@pytest.mark.parametrize("kw", [dict(k_u=3), dict(k_s=3), dict(k_u=0)])
def test_threshold_rejects(kw):
    args = dict(k_u=1, k_s=1, u=2, s=2) | kw
    with pytest.raises(ConfigError):
        hier_threshold(np.zeros(4), **args)


def test_brute_force_agrees_u3s3():
    rng = derive_rng(2)
    for _ in range(1000):
        g = rng.random(9)
        a, b = hier_threshold(g, 2, 2, 3, 3), brute_force_threshold(g, 2, 2, 3, 3)
        assert a.blocks.tolist() == b.blocks.tolist() and a.inblock == b.inblock


def test_brute_force_size_limit():
    with pytest.raises(ValueError):
        brute_force_threshold(np.zeros(64 * 8), 4, 4, 64, 8)


def test_dominant_block_selected():
    rng = derive_rng(3)
    for _ in range(100):
        g = rng.random(16)
        g[8:12] += 10
        assert 2 in hier_threshold(g, 1, 2, 4, 4).blocks
        assert 2 in brute_force_threshold(g, 1, 2, 4, 4).blocks


dims = st.tuples(st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda us: st.tuples(st.just(us[0]), st.just(us[1]),
                         st.integers(1, min(us[0], 2)), st.integers(1, min(us[1], 2))))


@given(dims, st.data())
def test_threshold_equals_exhaustive(d, data):
    u, s, k_u, k_s = d
    # coarse values force plenty of ties
    g = np.array(data.draw(st.lists(st.integers(0, 3), min_size=u * s, max_size=u * s)), float)
    a, b = hier_threshold(g, k_u, k_s, u, s), brute_force_threshold(g, k_u, k_s, u, s)
    assert a.blocks.tolist() == list(b.blocks) and a.inblock == b.inblock


@given(arrays(np.float64, 32, elements=st.floats(0, 1)), st.integers(0, 3), st.floats(0, 5))
def test_more_energy_never_evicts(g, which, bump):
    pos = hier_threshold(g, 2, 2, 8, 4).indices[which]
    g2 = g.copy()
    g2[pos] += bump
    assert pos in hier_threshold(g2, 2, 2, 8, 4).indices


def test_full_measurements_recover_support():
    rng = derive_rng(4)
    for _ in range(50):
        idx, x = hier_instance(rng, n=128)
        A = SubsampledDftOperator(128, rng.permutation(128))
        Y, _ = observe(A, x, 8, 4, rng)
        assert np.array_equal(hiiht_iterate(A, Y, 2, 2, 16, 8).indices, idx)


# --- activity decision -------------------------------------------------------------

def test_activity_modes():
    g = np.array([0.0, 0.0, 0.3, 0.1, 0.8, 0.0])
    est = hier_threshold(g, 3, 1, 3, 2)
    assert activity_decision(est).tolist() == [0, 1, 2]
    assert activity_decision(est, "threshold", 0.0).tolist() == [1, 2]
    assert activity_decision(est, "threshold", 0.5).tolist() == [2]
    assert activity_decision(est, "threshold", 0.81).tolist() == []
    with pytest.raises(ValueError):
        activity_decision(est, "threshold", -1)
    with pytest.raises(ValueError):
        activity_decision(est, "other")


def test_single_unit_user_is_active():
    rng = derive_rng(5)
    idx, x = hier_instance(rng, n=256, k_u=1, k_s=4)
    x /= np.linalg.norm(x)
    A = SubsampledDftOperator(256, rng.permutation(256))
    Y, _ = observe(A, x, 8, 10, rng)
    est = hiiht_iterate(A, Y, 1, 4, 32, 8)
    assert est.scores[est.blocks[0]] == pytest.approx(1.0)
    assert activity_decision(est, "threshold", 0.5).tolist() == [idx[0] // 8]


# --- least squares -----------------------------------------------------------------

def test_channel_recovery_exact():
    rng = derive_rng(6)
    for _ in range(20):
        idx, x = hier_instance(rng, n=64, k_u=2, k_s=3)
        A = SubsampledDftOperator(64, rng.choice(64, 16, replace=False))
        y = apply_operator(A, x)
        h = estimate_channel(A, y, idx)
        assert np.linalg.norm(h - x[idx]) <= 1e-8 * np.linalg.norm(x[idx])


def test_channel_trivial_cases():
    A = SubsampledDftOperator(32, derive_rng(7).choice(32, 8, replace=False))
    assert not np.any(estimate_channel(A, np.zeros(8), [1, 4, 9]))
    e = np.zeros(32)
    e[9] = 1
    assert estimate_channel(A, apply_operator(A, e), [9]) == pytest.approx([1.0])
    assert estimate_channel(A, np.zeros(8), []).shape == (0,)


@given(st.integers(0, 2**32), st.integers(1, 16))
def test_residual_orthogonal(seed, k):
    rng = derive_rng(seed)
    A = SubsampledDftOperator(128, rng.choice(128, 16, replace=False))
    S = np.sort(rng.choice(128, k, replace=False))
    y = crandn(rng, 16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        h = estimate_channel(A, y, S)
    AS = A.columns(S)
    assume(np.linalg.cond(AS) < 1e8)
    assert np.linalg.norm(AS.conj().T @ (y - AS @ h)) <= 1e-8 * np.linalg.norm(y)


def test_oversized_support():
    rng = derive_rng(8)
    A = SubsampledDftOperator(64, rng.choice(64, 4, replace=False))
    with pytest.raises(RankDeficientError):
        estimate_channel(A, np.ones(4), np.arange(5))
    h = estimate_channel(A, np.ones(4), np.arange(5), min_norm=True)
    assert np.allclose(A.columns(np.arange(5)) @ h, 1.0)


def test_singular_gram_warns():
    # columns 0 and 8 coincide on rows that are multiples of n/8
    A = SubsampledDftOperator(64, [0, 8, 16])
    y = apply_operator(A, np.eye(64)[0])
    with pytest.warns(RuntimeWarning, match="ridge"):
        h = estimate_channel(A, y, [0, 8])
    assert np.allclose(A.columns([0, 8]) @ h, y, atol=1e-6)


# --- data ---------------------------------------------------------------------------

def test_qpsk_decide():
    assert np.array_equal(qpsk_decide(QPSK * 3.7), QPSK)
    assert np.isnan(qpsk_decide(np.array([np.nan + 0j]))[0])


def test_data_exact_recovery():
    rng = derive_rng(9)
    for _ in range(20):
        idx, x = hier_instance(rng, n=128, k_u=3, k_s=2)
        A = SubsampledDftOperator(128, rng.choice(128, 16, replace=False))
        sym = QPSK[rng.integers(0, 4, (7, 16))]
        Y = np.stack([apply_operator(A, x * np.repeat(sym[i], 8)) for i in range(7)])
        h = estimate_channel(A, apply_operator(A, x), idx)
        blocks, dec = estimate_data(A, Y, idx, h, 8)
        assert np.array_equal(blocks, np.unique(idx // 8))
        assert np.array_equal(dec, sym[:, blocks])


def test_data_matched_filter_with_true_channel():
    A = SubsampledDftOperator(16, np.arange(16))
    x = np.zeros(16, complex)
    x[[2, 3]] = [0.6, -0.8j]
    y = apply_operator(A, x * QPSK[1])
    _, dec = estimate_data(A, y[None], [2, 3], x[[2, 3]], 4)
    assert dec[0, 0] == QPSK[1]


def test_zero_channel_block_erased():
    A = SubsampledDftOperator(16, np.arange(16))
    _, dec = estimate_data(A, np.ones((2, 16)), [0, 5], np.array([1.0, 0.0]), 4)
    assert not np.isnan(dec[:, 0]).any() and np.isnan(dec[:, 1]).all()


# --- iterations -----------------------------------------------------------------------

def test_single_iteration_is_one_threshold():
    rng = derive_rng(10)
    A = SubsampledDftOperator(256, rng.choice(256, 16, replace=False))
    Y = crandn(rng, 10, 16)
    a = hiiht_iterate(A, Y, 2, 2, 32, 8, iterations=1)
    b = hier_threshold(block_scores(apply_adjoint(A, Y)), 2, 2, 32, 8)
    assert np.array_equal(a.indices, b.indices) and a.iterations == 1
    with pytest.raises(ValueError):
        hiiht_iterate(A, Y, 2, 2, 32, 8, iterations=0)


def test_iterations_reach_true_support():
    # m = 64 >= 4 * k_u * k_s on a small instance
    rng = derive_rng(11)
    for _ in range(100):
        idx, x = hier_instance(rng, n=256, k_u=2, k_s=2)
        A = SubsampledDftOperator(256, rng.choice(256, 64, replace=False))
        Y, _ = observe(A, x, 8, 10, rng)
        est = hiiht_iterate(A, Y, 2, 2, 32, 8, iterations=20)
        assert np.array_equal(est.indices, idx)
        assert est.iterations < 20


def test_early_stop_reports_count():
    A = SubsampledDftOperator(64, np.arange(64))
    x = np.zeros(64, complex)
    x[[1, 2, 40, 41]] = 1
    est = hiiht_iterate(A, apply_operator(A, x)[None], 2, 2, 8, 8, iterations=10)
    assert est.iterations == 2 and est.indices.tolist() == [1, 2, 40, 41]


# --- trial evaluation ------------------------------------------------------------------

def _perfect_results(pattern, data):
    return [SubchannelResult(None, sc.active_blocks, data.blocks[j],
                             data.symbols[j].copy())
            for j, sc in enumerate(pattern.subchannels)]


def _pattern(blocks, c, t=3, seed=0):
    rng = derive_rng(seed)
    subs = [SubchannelActivity(np.arange(len(blocks)) + j * len(blocks), np.array(blocks),
                               np.tile(np.arange(2), (len(blocks), 1))) for j in range(c)]
    pattern = ActivityPattern(subs)
    cfg = SystemConfig(n=64, s=8, k_s=2, kbar_u=len(blocks), t=t)
    return pattern, draw_data(pattern, cfg, rng)


def test_perfect_detection_counts():
    pattern, data = _pattern([0, 3, 5, 6], c=8)
    tm = evaluate_trial(pattern, data, _perfect_results(pattern, data), 8)
    assert (tm.p_md, tm.p_fa, tm.symbol_error_rate) == (0, 0, 0)
    assert tm.supported_users == 4 * 8 and tm.exact_recovery_rate == 1
    assert tm.symbols == 4 * 8 * 2


def test_nothing_detected():
    pattern, data = _pattern([0, 3, 5, 6], c=2)
    empty = [SubchannelResult(None, np.zeros(0, int)) for _ in range(2)]
    tm = evaluate_trial(pattern, data, empty, 8)
    assert tm.p_md == 1 and tm.supported_users == 0 and tm.detection_rate == 0


def test_collided_users_not_counted():
    c = 8
    pattern, data = _pattern([5, 5, 7, 1], c=c)
    tm = evaluate_trial(pattern, data, _perfect_results(pattern, data), 8)
    assert tm.supported_users == 4 * c - 2 * c
    assert tm.eligible_users == 2 * c and tm.p_md == 0


def test_symbol_errors_and_false_alarms():
    pattern, data = _pattern([0, 3], c=1, t=5)
    res = _perfect_results(pattern, data)[0]
    res.decisions[0, 0] = -res.decisions[0, 0]
    res.decisions[1, 1] = np.nan
    res.active_blocks = np.array([0, 3, 7])
    tm = evaluate_trial(pattern, data, [res], 8)
    assert tm.symbol_errors == 2 and tm.symbols == 8
    assert tm.false_alarms == 1 and tm.p_fa == pytest.approx(1 / 6)


def test_metric_ranges_on_simulated_trial():
    cfg = SystemConfig(snr_db=0, t=20)
    act = draw_activity(cfg, derive_rng(12, 1))
    h = draw_channels(act, cfg, derive_rng(12, 2))
    data = draw_data(act, cfg, derive_rng(12, 3))
    Y, ops = simulate_uplink(cfg, h, data, derive_rng(12, 4), derive_rng(12, 5))
    tm = evaluate_trial(act, data, [detect_subchannel(A, Y[j], cfg) for j, A in enumerate(ops)],
                        cfg.u)
    for rate in (tm.p_md, tm.p_fa, tm.symbol_error_rate, tm.exact_recovery_rate):
        assert 0 <= rate <= 1
    assert tm.supported_users <= tm.active_users == cfg.kbar_u * cfg.c


def test_threshold_sweep_is_monotone():
    cfg = SystemConfig(snr_db=0, t=10, detector_mode="threshold")
    act = draw_activity(cfg, derive_rng(13, 1))
    h = draw_channels(act, cfg, derive_rng(13, 2))
    data = draw_data(act, cfg, derive_rng(13, 3))
    Y, ops = simulate_uplink(cfg, h, data, derive_rng(13, 4), derive_rng(13, 5))
    prev = None
    for xi in (2.0, 1.0, 0.5, 0.25, 0.1, 0.0):
        c = cfg.evolve(xi=xi)
        tm = evaluate_trial(act, data, [detect_subchannel(A, Y[j], c) for j, A in enumerate(ops)],
                            cfg.u)
        if prev is not None:
            assert tm.p_md <= prev.p_md and tm.p_fa >= prev.p_fa
        prev = tm


# --- slot averaging -------------------------------------------------------------------

def _score_variance(A, x, support, t, draws, rng):
    g = np.empty((draws, len(support)))
    for k in range(draws):
        Y, _ = observe(A, x, 8, t, rng)
        g[k] = correlation_energies(A, Y)[support]
    return g.var(axis=0, ddof=1).sum()


def _slot_variance_ratio():
    rng = derive_rng(14)
    idx, x = hier_instance(rng, n=1024, k_u=4, k_s=4)
    A = SubsampledDftOperator(1024, rng.choice(1024, 16, replace=False))
    v2 = _score_variance(A, x, idx, 2, 2000, rng)
    v100 = _score_variance(A, x, idx, 100, 2000, rng)
    return v100 / v2


def test_slot_averaging_variance_decay_rate():
    # the pilot term is deterministic, so var(g) scales as (t - 1) / t^2
    assert _slot_variance_ratio() == pytest.approx((99 / 100**2) / (1 / 2**2), rel=0.15)


def test_slot_averaging_variance_below_one_fiftieth():
    assert _slot_variance_ratio() <= 1 / 50
