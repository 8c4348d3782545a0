import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escada.errors import DimensionError
from escada.gp import (
    REFACTOR_EVERY,
    GPConfig,
    ProbeCache,
    empty_state,
    factor_from_scratch,
    from_snapshot,
    gp_predict,
    gp_sample_on_grid,
    gp_update,
    information_gain,
    load_snapshot,
    predict,
    save_snapshot,
    to_snapshot,
)
from escada.kernels import KernelSpec, kernel_matrix
from escada.oracles import dense_posterior

UNIT = GPConfig(KernelSpec("squared-exponential", (1.0,), 1.0), 1.0)


def _config(noise=0.1, family="squared-exponential", mean=0.0):
    return GPConfig(KernelSpec(family, (1.0, 1.5, 0.8), 2.0), noise, mean)


def _fill(cfg, X, y):
    s = empty_state(cfg)
    for xi, yi in zip(X, y):
        s = gp_update(s, xi, yi)
    return s


def test_prior_prediction():
    assert gp_predict(empty_state(UNIT), [0.3]) == (0.0, 1.0)


def test_first_update_factor():
    cfg = GPConfig(KernelSpec("laplacian", (2.0,), 3.0), 0.5)
    s = gp_update(empty_state(cfg), [1.0], 2.0)
    assert s.n == 1
    assert s.factor[0, 0] == pytest.approx(math.sqrt(3.5), abs=1e-15)


def test_one_point_posterior_closed_form():
    cfg = GPConfig(KernelSpec("squared-exponential", (1.0,), 2.0), 0.3)
    s = gp_update(empty_state(cfg), [0.7], 1.9)
    m, v = gp_predict(s, [0.7])
    assert m == pytest.approx(2.0 * 1.9 / 2.3, rel=1e-14)
    assert v == pytest.approx(2.0 * 0.3 / 2.3, rel=1e-14)


def test_two_point_posterior_matches_matrix_formula():
    cfg = GPConfig(KernelSpec("squared-exponential", (1.0,), 1.0), 0.2)
    X = np.array([[0.0], [0.8]])
    y = np.array([1.0, -0.5])
    s = _fill(cfg, X, y)
    k = math.exp(-0.32)
    a, b, c = 1.2, k, 1.2
    det = a * c - b * b
    inv = np.array([[c, -b], [-b, a]]) / det
    ks = np.array([math.exp(-0.5 * 0.3**2), math.exp(-0.5 * 0.5**2)])
    m, v = gp_predict(s, [0.3])
    assert m == pytest.approx(ks @ inv @ y, rel=1e-12)
    assert v == pytest.approx(1.0 - ks @ inv @ ks, rel=1e-12)


def test_predictions_match_dense_oracle():
    rng = np.random.default_rng(0)
    cfg = _config(mean=3.0)
    X = rng.uniform(0, 5, (40, 3))
    y = rng.normal(3.0, 1.0, 40)
    Xs = rng.uniform(0, 5, (50, 3))
    s = _fill(cfg, X, y)
    m, v = predict(s, Xs)
    m_ref, v_ref = dense_posterior(cfg, X, y, Xs)
    assert np.max(np.abs(m - m_ref)) / np.max(np.abs(m_ref)) < 1e-8
    assert np.max(np.abs(v - v_ref)) / cfg.kernel.variance < 1e-8


def test_probe_cache_matches_predict_across_forks():
    rng = np.random.default_rng(1)
    cfg = _config(family="laplacian")
    P = rng.uniform(0, 5, (30, 3))
    cache = ProbeCache(cfg, P)
    base = _fill(cfg, rng.uniform(0, 5, (10, 3)), rng.normal(size=10))
    a = gp_update(base, rng.uniform(0, 5, 3), 0.5)
    b = gp_update(base, rng.uniform(0, 5, 3), -0.5)  # fork from the shared prefix
    for s in (a, b, a, base):
        m, v = cache.predict(s)
        m_ref, v_ref = predict(s, P)
        np.testing.assert_allclose(m, m_ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(v, v_ref, rtol=0, atol=1e-10)


def test_states_are_persistent():
    cfg = _config()
    s1 = gp_update(empty_state(cfg), [1.0, 1.0, 1.0], 1.0)
    before = gp_predict(s1, [1.0, 1.0, 1.2])
    gp_update(s1, [1.0, 1.0, 1.1], 5.0)
    gp_update(s1, [1.0, 1.0, 1.3], -5.0)
    assert gp_predict(s1, [1.0, 1.0, 1.2]) == before


def test_repeated_observation_variance_bound():
    s = empty_state(UNIT)
    for m in range(1, 51):
        s = gp_update(s, [0.0], 0.1 * m)
        assert gp_predict(s, [0.0])[1] <= 1.0 / m


def test_refactorization_keeps_factor_exact():
    rng = np.random.default_rng(2)
    cfg = _config(noise=0.05)
    s = _fill(cfg, rng.uniform(0, 5, (REFACTOR_EVERY + 20, 3)), rng.normal(size=REFACTOR_EVERY + 20))
    L = factor_from_scratch(cfg, s.inputs)
    assert np.linalg.norm(s.factor - L) / np.linalg.norm(L) < 1e-8
    assert s.max_drift < 1e-8


def test_update_rejects_bad_input():
    s = empty_state(_config())
    with pytest.raises(ValueError):
        gp_update(s, [0.0, 0.0, 0.0], float("nan"))
    with pytest.raises(DimensionError):
        gp_update(s, [0.0, 0.0], 1.0)


def test_information_gain_values():
    assert information_gain(empty_state(UNIT)) == 0.0
    s = gp_update(empty_state(UNIT), [0.0], 1.0)
    assert information_gain(s) == pytest.approx(0.5 * math.log(2.0), rel=1e-14)


def test_information_gain_matches_log_det():
    rng = np.random.default_rng(3)
    cfg = _config(noise=0.3)
    X = rng.uniform(0, 5, (20, 3))
    s = _fill(cfg, X, rng.normal(size=20))
    _, logdet = np.linalg.slogdet(np.eye(20) + kernel_matrix(cfg.kernel, X, X) / cfg.noise_variance)
    assert abs(information_gain(s) - 0.5 * logdet) < 1e-6


def test_sample_moments_prior():
    cfg = GPConfig(KernelSpec("squared-exponential", (1.0,), 1.0), 1.0)
    pts = np.array([[0.0], [100.0]])
    rng = np.random.default_rng(4)
    draws = np.array([gp_sample_on_grid(empty_state(cfg), pts, rng) for _ in range(10_000)])
    n = draws.shape[0]
    # 5 sigma of Monte-Carlo error for the mean and the variance of N(0, 1)
    assert np.all(np.abs(draws.mean(axis=0)) < 5 / math.sqrt(n))
    assert np.all(np.abs(draws.var(axis=0, ddof=1) - 1.0) < 5 * math.sqrt(2 / (n - 1)))


def test_sample_interpolates_observation():
    cfg = GPConfig(KernelSpec("squared-exponential", (1.0,), 1.0), 1e-8)
    s = gp_update(empty_state(cfg), [0.5], 0.7)
    vals = gp_sample_on_grid(s, [[0.5], [1.0]], 5)
    assert abs(vals[0] - 0.7) < 1e-3


def test_sample_determinism():
    rng = np.random.default_rng(6)
    cfg = _config()
    s = _fill(cfg, rng.uniform(0, 5, (5, 3)), rng.normal(size=5))
    P = rng.uniform(0, 5, (20, 3))
    assert np.array_equal(gp_sample_on_grid(s, P, 11), gp_sample_on_grid(s, P, 11))
    cache = ProbeCache(cfg, P)
    assert np.array_equal(gp_sample_on_grid(s, None, 11, cache=cache), gp_sample_on_grid(s, None, 11, cache=cache))


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    cfg = _config(mean=112.5)
    s = _fill(cfg, rng.uniform(0, 5, (12, 3)), rng.normal(112.5, 5, 12))
    path = tmp_path / "gp.json"
    save_snapshot(s, path)
    back = load_snapshot(path)
    P = rng.uniform(0, 5, (8, 3))
    np.testing.assert_array_equal(predict(back, P)[0], predict(s, P)[0])
    assert to_snapshot(from_snapshot(to_snapshot(s))) == to_snapshot(s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2**31 - 1))
def test_variance_never_exceeds_prior(n, seed):
    rng = np.random.default_rng(seed)
    cfg = _config(noise=0.01)
    s = _fill(cfg, rng.uniform(0, 5, (n, 3)), rng.normal(size=n))
    _, v = predict(s, rng.uniform(0, 5, (10, 3)))
    assert np.all(v >= 0)
    assert np.all(v <= cfg.kernel.variance + 1e-12)
