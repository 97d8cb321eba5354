import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cpm.auxvars import stream
from cpm.errors import CapabilityError, DataError, ParameterError
from cpm.models import (GaussianREModel, HestonEulerModel, LinearGaussianSSM, read_observations,
                        rw_propose, write_observations)


def joint_gaussian_loglik(model, theta, y):
    """Brute-force density of the stacked observations from the state moments."""
    y = np.asarray(y, dtype=float).reshape(len(y), model.k)
    T, k = y.shape
    A = model.transition_matrix(theta)
    P = [np.eye(k)]
    for _ in range(1, T):
        P.append(A @ P[-1] @ A.T + np.eye(k))
    C = np.zeros((T * k, T * k))
    for s in range(T):
        for t in range(s, T):
            block = np.linalg.matrix_power(A, t - s) @ P[s]
            C[t * k:(t + 1) * k, s * k:(s + 1) * k] = block
            C[s * k:(s + 1) * k, t * k:(t + 1) * k] = block.T
    C += np.eye(T * k)
    return stats.multivariate_normal(np.zeros(T * k), C).logpdf(y.ravel())


# ---------------------------------------------------------------- random effects


def test_re_simulate_moments():
    y = GaussianREModel(theta=0.5).simulate(10**6, stream(1))
    assert abs(y.mean() - 0.5) < 3 * math.sqrt(2 / 10**6)
    assert abs(y.var() / 2.0 - 1.0) < 0.01


def test_re_exact_loglik_closed_forms():
    m = GaussianREModel()
    assert m.exact_loglik(0.0, np.array([0.0])) == pytest.approx(-0.5 * math.log(4 * math.pi))
    y = np.array([0.3, -1.2, 2.0])
    assert m.exact_loglik(0.7, y) == pytest.approx(stats.norm(0.7, math.sqrt(2)).logpdf(y).sum())


def test_re_prior_and_score():
    m = GaussianREModel(prior_sd=100.0)
    assert m.log_prior(0.5) == pytest.approx(stats.norm(0, 100).logpdf(0.5))
    # d/dtheta log phi(y; theta, 2) = (y - theta) / 2
    assert m.exact_score(0.2, np.array([1.0])) == pytest.approx(0.4)


def test_re_posterior_is_conjugate():
    m = GaussianREModel(prior_sd=3.0)
    y = np.array([0.1, 0.9, 1.4])
    mean, sd = m.posterior(y)
    prec = 1 / 9 + 3 / 2
    assert sd == pytest.approx(prec**-0.5)
    assert mean == pytest.approx(y.sum() / 2 / prec)


def test_re_rejects_bad_data():
    with pytest.raises(DataError):
        GaussianREModel().exact_loglik(0.0, np.array([np.nan]))


# ---------------------------------------------------------------- linear SSM


def test_ssm_transition_matrix():
    A = LinearGaussianSSM(k=3).transition_matrix(0.5)
    assert A[0, 0] == 0.5 and A[0, 1] == 0.25 and A[0, 2] == 0.125 and A[2, 1] == 0.25


def test_ssm_theta_zero_is_iid():
    y = LinearGaussianSSM(k=1, theta=0.0).simulate(200000, stream(2))[:, 0]
    assert abs(y.var() - 2.0) < 0.03
    assert abs(np.corrcoef(y[:-1], y[1:])[0, 1]) < 0.01


def test_ssm_single_step_static_gaussian():
    m = LinearGaussianSSM(k=1)
    assert m.exact_loglik(0.0, np.array([[1.0]])) == pytest.approx(
        stats.norm(0, math.sqrt(2)).logpdf(1.0))


def test_kalman_matches_joint_density_k2_t3():
    m = LinearGaussianSSM(k=2, theta=0.4)
    y = m.simulate(3, stream(3))
    assert m.exact_loglik(0.4, y) == pytest.approx(joint_gaussian_loglik(m, 0.4, y), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 3]), st.sampled_from([1, 2, 3, 5]), st.floats(-0.9, 0.9),
       st.integers(0, 2**31))
def test_kalman_matches_joint_density(k, T, theta, seed):
    m = LinearGaussianSSM(k=k, theta=theta)
    y = np.random.default_rng(seed).normal(0, 2, (T, k))
    assert m.exact_loglik(theta, y) == pytest.approx(joint_gaussian_loglik(m, theta, y), rel=1e-9)


def test_ssm_uniform_prior():
    m = LinearGaussianSSM()
    assert m.log_prior(0.3) == pytest.approx(-math.log(2))
    assert m.log_prior(1.0) == -math.inf


def test_ssm_stability_warning():
    with pytest.warns(UserWarning):
        LinearGaussianSSM(k=2, theta=0.9).check_stability()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        LinearGaussianSSM(k=2, theta=0.4).check_stability()


# ---------------------------------------------------------------- Heston


def test_heston_parameter_validation():
    with pytest.raises(ParameterError):
        HestonEulerModel(chi=1.0)
    with pytest.raises(ParameterError):
        HestonEulerModel(omega=0.0)


def test_heston_one_euler_step_by_hand():
    m = HestonEulerModel(mu=2.0, upsilon=0.05, omega=0.15, chi=-0.5, I=1, delta_obs=0.1)
    x0 = 0.0
    eta = 0.5
    eps = 0.1
    # drift upsilon (mu e^{-x} - 1) - omega^2/2 e^{-x} at x = 0
    drift = 0.05 * (2.0 - 1.0) - 0.5 * 0.15**2
    expected = x0 + eps * drift + math.sqrt(eps) * 0.15 * 1.0 * eta
    assert expected == pytest.approx(0.003875 + 0.0237170824512628, rel=1e-12)
    assert m.euler_step(np.array([x0]), np.array([eta]))[0] == pytest.approx(expected, rel=1e-14)
    th = m.true_theta
    v = np.array([[0.0, eta]])
    x_end, log_w = m.pf_step(th, 0.0, np.array([[x0]]), v)
    assert x_end[0, 0] == pytest.approx(expected, rel=1e-12)
    # sigma2_hat = eps e^0, gamma_hat = sqrt(eps) * eta, y = 0
    var = (1 - 0.25) * eps
    mean = -0.5 * math.sqrt(eps) * eta
    assert log_w[0] == pytest.approx(stats.norm(mean, math.sqrt(var)).logpdf(0.0), rel=1e-12)


def test_heston_degenerate_vol_of_vol():
    m = HestonEulerModel(mu=1.5, upsilon=0.05, omega=1e-6, chi=-0.5)
    y, x = m.simulate(20000, stream(4), return_states=True)
    assert np.allclose(np.exp(x), 1.5, rtol=1e-3)
    assert abs(y.var() / 1.5 - 1.0) < 0.05
    assert abs(y.mean()) < 4 * math.sqrt(1.5 / len(y))


def test_heston_reparameterization_roundtrip():
    m = HestonEulerModel()
    par = m.to_natural(m.true_theta)
    assert (par.mu, par.upsilon, par.omega) == pytest.approx((1.0, 0.05, 0.15))
    assert par.chi == pytest.approx(-0.5)
    assert par.phi == pytest.approx(math.exp(-0.05))
    assert m.aux_dim == m.I + 1


def test_heston_prior_is_proper_on_chi():
    m = HestonEulerModel()
    a = np.linspace(-12, 12, 20001)
    dens = [math.exp(m.log_prior(np.array([0.0, -3.0, -2.0, ai]))
                     - m.log_prior(np.array([0.0, -3.0, -2.0, 0.0])) + math.log(0.5)) for ai in a]
    # the uniform(-1, 1) prior on chi has density 1/2 at 0, and tanh' (0) = 1
    assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-4)


def test_heston_stationary_initial_variance():
    m = HestonEulerModel()
    shape, rate = m.stationary_shape_rate()
    x = m._initial_log_variance(stream(5).standard_normal(200000), m.natural)
    assert abs(np.exp(x).mean() - shape / rate) < 4 * math.sqrt(shape) / rate / math.sqrt(200000)


def test_heston_has_no_oracle():
    m = HestonEulerModel()
    with pytest.raises(CapabilityError):
        m.exact_loglik(m.true_theta, np.zeros(3))


# ---------------------------------------------------------------- proposal, io


def test_rw_propose_scaling():
    T = 400
    c = 1.3
    rng = stream(6)
    d = np.array([rw_propose(np.zeros(1), np.array([[c * c / T]]), rng)[0] for _ in range(100000)])
    se = math.sqrt(2.0 / len(d)) * c * c / T
    assert abs(d.var() - c * c / T) < 3 * se


def test_rw_propose_tiny_and_non_pd():
    th = np.array([1.0, 2.0])
    out = rw_propose(th, 1e-24 * np.eye(2), stream(7))
    assert np.allclose(out, th, atol=1e-9)
    with pytest.raises(ParameterError):
        rw_propose(th, np.array([[1.0, 2.0], [2.0, 1.0]]), stream(7))


def test_observation_roundtrip(tmp_path):
    y = LinearGaussianSSM(k=2).simulate(7, stream(8))
    p = tmp_path / "d.csv"
    write_observations(p, y, "hello")
    assert p.read_bytes().startswith(b"# hello\r\nt,y1,y2\r\n")
    assert np.array_equal(read_observations(p), y)
    y1 = GaussianREModel().simulate(5, stream(9))
    write_observations(p, y1)
    assert np.array_equal(read_observations(p), y1)


def test_read_observations_rejects_bad_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("t,z\r\n1,2\r\n")
    with pytest.raises(DataError):
        read_observations(p)
