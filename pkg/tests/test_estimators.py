import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from cpm.auxvars import AuxBlock, AuxLayout, cn_step, sample_fresh, stream
from cpm.errors import CapabilityError, DegenerateEstimateError, ParameterError
from cpm.estimators import (ISEstimator, PFEstimator, bind, is_loglik, is_score, pf_loglik,
                            pilot_logistic_params, sorted_systematic_resample)
from cpm.models import GaussianREModel, HestonEulerModel, LinearGaussianSSM


def _block(values, layout):
    return AuxBlock(np.asarray(values, dtype=float), layout)


# ---------------------------------------------------------------- importance sampling


def test_is_single_particle_at_mode():
    m = GaussianREModel()
    est = ISEstimator(1)
    u = _block([0.0], est.layout(m, 1))
    assert is_loglik(est, m, 0.0, np.array([0.0]), u).value == pytest.approx(
        -0.5 * math.log(2 * math.pi))


def test_is_unbiased_single_observation():
    # 10^5 independent replicates of one factor, laid out as 10^5 identical observations
    m = GaussianREModel()
    est = ISEstimator(32)
    n = 10**5
    y = np.full(n, 0.5)
    u = sample_fresh(est.layout(m, n), stream(1))
    r = np.exp(is_loglik(est, m, 0.5, y, u).per_obs)
    target = 1 / math.sqrt(4 * math.pi)
    assert abs(r.mean() - target) < 3 * r.std() / math.sqrt(n)


def test_is_matches_generic_path():
    m = GaussianREModel()
    est = ISEstimator(5)
    y = m.simulate(40, stream(2))
    u = sample_fresh(est.layout(m, 40), stream(3))
    fast = is_loglik(est, m, 0.3, y, u)
    lw = m.is_log_weights(0.3, y, u.cells)
    slow = special.logsumexp(lw, axis=1) - math.log(5)
    assert np.allclose(fast.per_obs, slow, rtol=1e-12)
    assert fast.value == pytest.approx(slow.sum(), rel=1e-12)


def test_is_deterministic():
    m = GaussianREModel()
    est = ISEstimator(8)
    y = m.simulate(50, stream(4))
    u = sample_fresh(est.layout(m, 50), stream(5))
    assert is_loglik(est, m, 0.1, y, u).value == is_loglik(est, m, 0.1, y, u).value


def test_is_layout_mismatch_and_capability():
    m = GaussianREModel()
    est = ISEstimator(8)
    with pytest.raises(ParameterError):
        is_loglik(est, m, 0.0, np.zeros(3), sample_fresh(AuxLayout(3, 7), stream(0)))
    with pytest.raises(CapabilityError):
        is_loglik(est, LinearGaussianSSM(), 0.0, np.zeros(3), sample_fresh(AuxLayout(3, 8), stream(0)))


def test_is_degenerate_raises_with_index():
    m = GaussianREModel()
    est = ISEstimator(2)
    y = np.array([0.0, 1e200])
    u = sample_fresh(est.layout(m, 2), stream(6))
    with pytest.raises(DegenerateEstimateError) as info:
        is_loglik(est, m, 0.0, y, u)
    assert info.value.t == 1


def test_is_score_matches_finite_differences():
    m = GaussianREModel()
    est = ISEstimator(6)
    y = m.simulate(30, stream(7))
    u = sample_fresh(est.layout(m, 30), stream(8))
    th = 0.37
    h = 1e-6
    fd = (is_loglik(est, m, th + h, y, u).value - is_loglik(est, m, th - h, y, u).value) / (2 * h)
    g = is_score(est, m, th, y, u)[0]
    assert abs(g - fd) / abs(fd) < 1e-5


def test_correlated_pairs_shrink_ratio_variance():
    m = GaussianREModel()
    est = ISEstimator(16)
    y = m.simulate(256, stream(9))
    lay = est.layout(m, 256)
    diffs_cn, diffs_ind = [], []
    for k in range(400):
        u = sample_fresh(lay, stream(10, k))
        a = is_loglik(est, m, 0.5, y, u).value
        b = is_loglik(est, m, 0.5, y, cn_step(u, 0.9999, stream(11, k))).value
        c = is_loglik(est, m, 0.5, y, sample_fresh(lay, stream(12, k))).value
        diffs_cn.append(b - a)
        diffs_ind.append(c - a)
    assert np.var(diffs_ind) > 10 * np.var(diffs_cn)


# ---------------------------------------------------------------- resampling


def test_resample_equal_weights_hits_each_once():
    u_r = 0.0  # Phi(0) = 1/2
    sigma, anc = sorted_systematic_resample(np.zeros(4), np.array([3.0, 1.0, 2.0, 0.0]), u_r)
    assert sigma.tolist() == [3, 1, 2, 0]
    assert anc.tolist() == [0, 1, 2, 3]


def test_resample_single_mass():
    x = np.array([0.5, -1.0, 2.0, 0.0])
    lw = np.array([-np.inf, -np.inf, 0.0, -np.inf])
    sigma, anc = sorted_systematic_resample(lw, x, 1.3)
    assert np.all(sigma[anc] == 2)


def test_resample_all_zero_raises():
    with pytest.raises(DegenerateEstimateError):
        sorted_systematic_resample(np.full(3, -np.inf), np.arange(3.0), 0.0)


def test_resample_offspring_unbiased():
    w = np.array([0.5, 0.3, 0.2])
    x = np.array([0.0, 1.0, 2.0])
    rng = stream(13)
    counts = np.array([np.bincount(sorted_systematic_resample(np.log(w), x, rng.standard_normal())[1],
                                   minlength=3) for _ in range(100000)])
    mean = counts.mean(0)
    se = counts.std(0) / math.sqrt(len(counts))
    assert np.all(np.abs(mean - 3 * w) < 3 * se + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-4, 4))
def test_resample_ancestors_valid_and_sorted(lw, u_r):
    lw = np.array(lw)
    x = np.random.default_rng(len(lw)).normal(size=len(lw))
    sigma, anc = sorted_systematic_resample(lw, x, u_r)
    assert np.all((anc >= 0) & (anc < len(lw)))
    assert np.all(np.diff(anc) >= 0)
    assert np.all(np.diff(x[sigma]) >= 0)


# ---------------------------------------------------------------- particle filter


def _pf_setup(k=1, T=5, N=64, theta=0.4, seed=0):
    m = LinearGaussianSSM(k=k, theta=theta)
    y = m.simulate(T, stream(seed, 1))
    loc, scale = pilot_logistic_params(m, theta, T, seed=seed)
    est = PFEstimator(N, loc, scale)
    return m, y, est


def test_pf_layout_size():
    m, y, est = _pf_setup(T=3, N=4)
    assert est.layout(m, 3).size == 14


def test_pf_unbiased_k1():
    m, y, est = _pf_setup(k=1, T=5, N=64)
    ll = m.exact_loglik(0.4, y)
    lay = est.layout(m, 5)
    r = np.array([math.exp(pf_loglik(est, m, 0.4, y, sample_fresh(lay, stream(14, j))).value - ll)
                  for j in range(10000)])
    assert abs(r.mean() - 1.0) < 3 * r.std() / math.sqrt(len(r))


def test_pf_single_particle_by_hand():
    m = LinearGaussianSSM(k=1, theta=0.4)
    est = PFEstimator(1)
    y = np.array([[0.3], [-0.2]])
    v = np.array([0.7, -1.1, 0.25])  # x1, eta2, resampling seed
    u = _block(v, est.layout(m, 2))
    x1 = 0.7
    x2 = 0.4 * x1 - 1.1
    expected = stats.norm.logpdf(0.3, x1) + stats.norm.logpdf(-0.2, x2)
    for backend in ("python", "numba"):
        assert pf_loglik(est, m, 0.4, y, u, backend=backend).value == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_pf_backends_agree(k):
    m, y, est = _pf_setup(k=k, T=30, N=16, seed=k)
    u = sample_fresh(est.layout(m, 30), stream(15, k))
    a = pf_loglik(est, m, 0.4, y, u, backend="python")
    b = pf_loglik(est, m, 0.4, y, u, backend="numba")
    assert np.allclose(a.per_obs, b.per_obs, rtol=1e-12, atol=1e-12)


def test_pf_backends_agree_heston():
    m = HestonEulerModel()
    y = m.simulate(20, stream(16))
    loc, scale = pilot_logistic_params(m, m.true_theta, 20)
    est = PFEstimator(12, loc, scale)
    u = sample_fresh(est.layout(m, 20), stream(17))
    a = pf_loglik(est, m, m.true_theta, y, u, backend="python")
    b = pf_loglik(est, m, m.true_theta, y, u, backend="numba")
    assert np.allclose(a.per_obs, b.per_obs, rtol=1e-10)


def test_pf_deterministic_and_sum():
    m, y, est = _pf_setup(k=2, T=40, N=20)
    u = sample_fresh(est.layout(m, 40), stream(18))
    a = pf_loglik(est, m, 0.4, y, u)
    b = pf_loglik(est, m, 0.4, y, u)
    assert a.value == b.value
    assert a.value == pytest.approx(a.per_obs.sum(), rel=1e-15)


def test_pf_initial_label_permutation_invariance():
    m, y, est = _pf_setup(k=2, T=25, N=16)
    lay = est.layout(m, 25)
    u = sample_fresh(lay, stream(19))
    vals = u.values.copy()
    cells0 = vals[: lay.N * lay.p].reshape(lay.N, lay.p)
    perm = np.random.default_rng(0).permutation(lay.N)
    vals[: lay.N * lay.p] = cells0[perm].ravel()
    a = pf_loglik(est, m, 0.4, y, u).value
    b = pf_loglik(est, m, 0.4, y, AuxBlock(vals, lay)).value
    assert a == b


def _theta_profile(k, seed):
    m, y, est = _pf_setup(k=k, T=50, N=32)
    lay = est.layout(m, 50)
    grid = np.linspace(0.38, 0.42, 41)
    u = sample_fresh(lay, stream(20, seed))
    fixed = np.array([pf_loglik(est, m, th, y, u).value for th in grid])
    fresh = np.array([pf_loglik(est, m, 0.4, y, sample_fresh(lay, stream(21, seed, j))).value
                      for j in range(len(grid))])
    return np.abs(np.diff(fixed)), np.abs(np.diff(fresh))


def test_pf_is_continuous_in_theta_scalar_state():
    fixed, fresh = _theta_profile(1, 0)
    assert fixed.max() < 0.1 < fresh.mean()


def test_pf_sorting_smooths_theta_profile_in_two_dimensions():
    fixed, fresh = _theta_profile(2, 0)
    assert fixed.mean() < 0.5 * fresh.mean()


def test_bound_estimator_dispatch():
    m = GaussianREModel()
    y = m.simulate(10, stream(21))
    b = bind(ISEstimator(4), m, y)
    u = sample_fresh(b.layout, stream(22))
    assert b.loglik(0.1, u).value == is_loglik(ISEstimator(4), m, 0.1, y, u).value
    s, y2, est = _pf_setup(T=10, N=4)
    with pytest.raises(CapabilityError):
        bind(est, s, y2).score(0.4, sample_fresh(est.layout(s, 10), stream(0)))
