import numpy as np
import pytest

from lmdm.data import (SyntheticSpec, apply_visibility, block_autocorr_expectation,
                       block_expectations, block_statistics, drift_metric, generate_corpus,
                       local_conditions, oracle_moments, read_corpus, simulate, trend_slope,
                       write_corpus)
from lmdm.errors import ConfigError, ContractError

SPEC = SyntheticSpec()


def test_long_simulation_matches_stationary_moments():
    rng = np.random.default_rng(0)
    for g in (0, 5):
        x = simulate(SPEC, g, 100_000, rng)
        m = oracle_moments(SPEC, g)
        np.testing.assert_allclose(x.var(axis=1), m.variance, rtol=0.03)
        np.testing.assert_allclose(x.mean(axis=1), m.mean, atol=0.03)
        lag1 = ((x[:, 1:] - x.mean(1, keepdims=True)) * (x[:, :-1] - x.mean(1, keepdims=True))).mean(1)
        np.testing.assert_allclose(lag1 / x.var(1), m.autocorr, atol=0.03)


def test_block_expectations_match_simulated_blocks():
    rng = np.random.default_rng(1)
    sims = np.stack([simulate(SPEC, 2, 8, rng) for _ in range(4000)])
    st = block_statistics(sims, 8)
    ex = block_expectations(SPEC, 2, 8)
    np.testing.assert_allclose(st.mean[:, 0].mean(0), ex.mean, atol=0.05)
    np.testing.assert_allclose(st.variance[:, 0].mean(0), ex.variance, rtol=0.06)
    ac = block_autocorr_expectation(SPEC, 2, 8, seed=5)
    np.testing.assert_allclose(st.autocorr[:, 0].mean(0), ac, atol=0.03)


def test_block_statistics_shapes_and_constant_blocks():
    x = np.zeros((2, 3, 12))
    st = block_statistics(x, 4)
    assert st.mean.shape == (2, 3, 3)
    assert np.all(st.autocorr == 0)
    with pytest.raises(ContractError):
        block_statistics(x, 5)


def test_drift_metric_is_zero_free_and_batched():
    x = np.stack([simulate(SPEC, g, 32, np.random.default_rng(g)) for g in (0, 1)])
    d = drift_metric(x, SPEC, [0, 1], 8)
    assert d.shape == (2, 4) and np.all(d >= 0)
    np.testing.assert_allclose(drift_metric(x[1], SPEC, 1, 8), d[1])


def test_trend_slope_recovers_line():
    slope, se = trend_slope(3.0 + 0.5 * np.arange(10))
    assert slope == pytest.approx(0.5) and se == pytest.approx(0, abs=1e-12)


def test_corpus_is_deterministic_per_item():
    a = generate_corpus(SPEC, 6, seed=4)
    b = generate_corpus(SPEC, 3, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.latents, y.latents)
        assert x.condition_id == y.condition_id
    assert a[0].latents.shape == (SPEC.channels, SPEC.frames)


def test_accompaniment_is_coupled():
    items = generate_corpus(SPEC, 40, seed=2, accompaniment=True)
    r = [np.corrcoef(it.latents.ravel(), it.accompaniment.ravel())[0, 1] for it in items]
    assert np.mean(r) > 0.2


def test_visibility_zeroes_future_frames():
    chans = np.ones((2, 10))
    out = apply_visibility(chans, s=4, t_f=2)
    assert out[:, :6].all() and not out[:, 6:].any()
    assert apply_visibility(chans, 4, None).all()
    assert not apply_visibility(chans, 4, -4).any()


def test_local_conditions():
    x = np.array([[3.0, 0.0], [4.0, -2.0]])
    lc = local_conditions(x)
    np.testing.assert_allclose(lc[0], [np.sqrt(12.5), np.sqrt(2)], rtol=1e-6)
    np.testing.assert_array_equal(lc[1], [1.0, 1.0])


def test_corpus_roundtrip(tmp_path):
    items = generate_corpus(SPEC, 4, seed=1, accompaniment=True)
    manifest = write_corpus(items, tmp_path, SPEC)
    back = read_corpus(manifest, SPEC)
    assert len(back) == 4
    for a, b in zip(items, back):
        np.testing.assert_array_equal(a.latents, b.latents)
        np.testing.assert_array_equal(a.accompaniment, b.accompaniment)
        assert a.condition_id == b.condition_id


def test_spec_validation_and_unknown_condition():
    with pytest.raises(ConfigError):
        SyntheticSpec(rho_range=(0.5, 1.0))
    with pytest.raises(ConfigError):
        SyntheticSpec(amp_range=(1.0, 0.5))
    with pytest.raises(LookupError):
        oracle_moments(SPEC, 99)


def test_corpus_channel_means_at_a_thousand_items():
    items = generate_corpus(SPEC, 1000, seed=0)
    T_ = SPEC.frames
    lags = np.arange(-(T_ - 1), T_)
    for g in range(SPEC.n_conditions):
        x = np.stack([it.latents for it in items if it.condition_id == g]).astype(np.float64)
        # exact variance of a T-frame time average under the stationary autocovariance
        gam = SPEC.tables().autocov(g, lags)
        var_item = (gam * (T_ - np.abs(lags))).sum(axis=1) / T_ ** 2
        se = np.sqrt(var_item / len(x))
        assert np.all(np.abs(x.mean(axis=(0, 2)) - oracle_moments(SPEC, g).mean) < 3 * se)


def test_zero_visibility_offset_keeps_accompaniment_aligned():
    it = generate_corpus(SPEC, 1, seed=0, accompaniment=True, future_visibility=0)[0]
    assert it.accompaniment.shape == it.latents.shape and it.future_visibility == 0


def test_oracle_variance_of_pure_components():
    ar = SyntheticSpec(amp_range=(0.0, 0.0))
    tab = ar.tables()
    np.testing.assert_allclose(oracle_moments(ar, 3).variance,
                               tab.sigma[3] ** 2 / (1 - tab.rho[3] ** 2))
    sin = SyntheticSpec(sigma_range=(0.0, 0.0))
    np.testing.assert_allclose(oracle_moments(sin, 3).variance, sin.tables().amp[3] ** 2 / 2)


def test_true_process_drift_has_no_trend():
    o, blocks = 8, 50
    rng = np.random.default_rng(3)
    x = np.stack([simulate(SPEC, 4, blocks * o, rng) for _ in range(32)])
    d = drift_metric(x, SPEC, 4, o).mean(axis=0)
    slope, se = trend_slope(d)
    assert abs(slope) <= 2 * se


def test_zero_rollout_metric_is_the_plug_in_value():
    m = oracle_moments(SPEC, 2)
    expected = (m.mean ** 2 + m.variance ** 2 + m.autocorr ** 2).sum()
    np.testing.assert_allclose(drift_metric(np.zeros((SPEC.channels, 24)), SPEC, 2, 8), expected)


def test_drift_metric_is_a_sum_over_channels():
    x = simulate(SPEC, 1, 16, np.random.default_rng(0))
    st, m = block_statistics(x, 8), oracle_moments(SPEC, 1)
    per = (st.mean - m.mean) ** 2 + (st.variance - m.variance) ** 2 + (st.autocorr - m.autocorr) ** 2
    perm = np.random.default_rng(1).permutation(SPEC.channels)
    np.testing.assert_allclose(per[:, perm].sum(axis=1), drift_metric(x, SPEC, 1, 8))
