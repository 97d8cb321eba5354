"""Statistical models: Gaussian random effects, linear Gaussian state-space, Heston-Euler SV.

Every model exposes

* ``simulate(T, rng)`` for synthetic observations,
* ``log_prior(theta)``,
* ``aux_dim`` (``p``, normals per particle per step) and ``state_dim`` (``k``),
* estimator hooks: ``is_log_weights`` for importance sampling, ``pf_step`` for
  the particle filter,
* ``exact_loglik`` where a closed form or Kalman recursion exists.

Parameters are passed as 1-d float arrays so that samplers can treat all models
alike. The Heston model is parameterized on an unconstrained scale, see
:meth:`HestonEulerModel.to_natural`.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy import special, stats

from .errors import CapabilityError, DataError, ParameterError

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "GaussianREModel",
    "LinearGaussianSSM",
    "HestonEulerModel",
    "HestonParams",
    "rw_propose",
    "write_observations",
    "read_observations",
]


def _theta_scalar(theta):
    return float(np.asarray(theta, dtype=float).reshape(-1)[0])


def _check_data(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DataError("observations contain non-finite values")
    return y


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@numba.njit(cache=True)
def _re_log_mean_weights(y, theta, u):
    T, N = u.shape
    out = np.empty(T)
    c = 0.5 * LOG_2PI + math.log(N)
    for t in range(T):
        top = -np.inf
        for i in range(N):
            d = y[t] - theta - u[t, i]
            v = -0.5 * d * d
            if v > top:
                top = v
        s = 0.0
        for i in range(N):
            d = y[t] - theta - u[t, i]
            s += math.exp(-0.5 * d * d - top)
        out[t] = top + math.log(s) - c
    return out


@numba.njit(cache=True)
def _re_score(y, theta, u):
    # sum_t sum_i softmax_i(log w_t) * (y_t - theta - u_ti)
    T, N = u.shape
    g = 0.0
    for t in range(T):
        top = -np.inf
        for i in range(N):
            d = y[t] - theta - u[t, i]
            v = -0.5 * d * d
            if v > top:
                top = v
        s = 0.0
        sd = 0.0
        for i in range(N):
            d = y[t] - theta - u[t, i]
            e = math.exp(-0.5 * d * d - top)
            s += e
            sd += e * d
        g += sd / s
    return g


@dataclass(frozen=True)
class GaussianREModel:
    """``X_t ~ N(theta, 1)``, ``Y_t | X_t ~ N(X_t, 1)``; marginally ``Y_t ~ N(theta, 2)``.

    The importance proposal is the latent law itself, ``X_{t,i} = theta + U_{t,i}``,
    so the weight is ``phi(y_t; theta + U_{t,i}, 1)``.
    """

    theta: float = 0.5
    prior_sd: float = 100.0

    aux_dim = 1
    state_dim = 1
    dim = 1
    # 2 E[(d/du varpi)^2] under the model's own data law; kappa^2 ~ this * psi
    kappa_sq_per_psi = 4.0

    def __post_init__(self):
        if not self.prior_sd > 0:
            raise ParameterError("prior_sd must be positive")

    def simulate(self, T, rng):
        if T < 1:
            raise ParameterError("T must be >= 1")
        x = self.theta + rng.standard_normal(T)
        return x + rng.standard_normal(T)

    def log_prior(self, theta):
        th = _theta_scalar(theta)
        return float(_norm_logpdf(th, 0.0, self.prior_sd**2))

    def exact_loglik(self, theta, y):
        y = _check_data(y).reshape(-1)
        return float(np.sum(_norm_logpdf(y, _theta_scalar(theta), 2.0)))

    def exact_score(self, theta, y):
        """Gradient of the exact log-likelihood, ``sum_t (y_t - theta) / 2``."""
        y = _check_data(y).reshape(-1)
        return np.array([np.sum(y - _theta_scalar(theta)) / 2.0])

    def posterior(self, y):
        """Conjugate posterior ``(mean, sd)`` of theta under the zero-mean Gaussian prior."""
        y = _check_data(y).reshape(-1)
        prec = y.size / 2.0 + 1.0 / self.prior_sd**2
        return float(np.sum(y) / 2.0 / prec), float(1.0 / math.sqrt(prec))

    def is_log_weights(self, theta, y, cells):
        """``(T, N)`` log importance weights for variates ``cells`` of shape (T, N, 1)."""
        th = _theta_scalar(theta)
        d = np.asarray(y, dtype=float).reshape(-1, 1) - th - cells[..., 0]
        return -0.5 * (LOG_2PI + d * d)

    def is_log_mean_weights(self, theta, y, cells):
        """Per-observation ``log mean_i w_{t,i}`` (fused compiled path)."""
        y = np.ascontiguousarray(y, dtype=float).reshape(-1)
        return _re_log_mean_weights(y, _theta_scalar(theta), np.ascontiguousarray(cells[..., 0]))

    def is_score(self, theta, y, cells):
        """Gradient of ``sum_t log mean_i w_{t,i}`` with respect to theta (compiled path)."""
        y = np.ascontiguousarray(y, dtype=float).reshape(-1)
        return np.array([_re_score(y, _theta_scalar(theta), np.ascontiguousarray(cells[..., 0]))])

    def is_log_weight_grad(self, theta, y, cells):
        """``(T, N, d)`` derivatives of the log weights with respect to theta."""
        th = _theta_scalar(theta)
        d = np.asarray(y, dtype=float).reshape(-1, 1) - th - cells[..., 0]
        return d[..., None]


@dataclass(frozen=True)
class LinearGaussianSSM:
    """``X_1 ~ N(0, I_k)``, ``X_{t+1} = A X_t + V``, ``Y_t = X_t + W`` with ``A_ij = theta^(|i-j|+1)``.

    The particle filter uses the transition density as proposal, so ``p = k`` and
    the weights are the observation densities.
    """

    k: int = 2
    theta: float = 0.4
    prior_bounds: tuple = (-1.0, 1.0)

    dim = 1

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("state dimension k must be >= 1")
        lo, hi = self.prior_bounds
        if not lo < hi:
            raise ParameterError("prior_bounds must satisfy lo < hi")

    @property
    def aux_dim(self):
        return self.k

    @property
    def state_dim(self):
        return self.k

    def transition_matrix(self, theta=None):
        th = self.theta if theta is None else _theta_scalar(theta)
        i = np.arange(self.k)
        A = th ** (np.abs(i[:, None] - i[None, :]) + 1.0)
        return A

    def check_stability(self, theta=None):
        radius = np.max(np.abs(np.linalg.eigvals(self.transition_matrix(theta))))
        if radius >= 1.0:
            warnings.warn(f"transition matrix has spectral radius {radius:.3f} >= 1", stacklevel=2)
        return radius

    def simulate(self, T, rng, return_states=False):
        if T < 1:
            raise ParameterError("T must be >= 1")
        self.check_stability()
        A = self.transition_matrix()
        x = np.empty((T, self.k))
        x[0] = rng.standard_normal(self.k)
        for t in range(1, T):
            x[t] = A @ x[t - 1] + rng.standard_normal(self.k)
        y = x + rng.standard_normal((T, self.k))
        return (y, x) if return_states else y

    def log_prior(self, theta):
        th = _theta_scalar(theta)
        lo, hi = self.prior_bounds
        if lo < th < hi:
            return -math.log(hi - lo)
        return -math.inf

    def exact_loglik(self, theta, y):
        """Kalman-filter prediction-error decomposition of ``log p(y_{1:T} | theta)``."""
        y = _check_data(y).reshape(len(y), self.k)
        A = self.transition_matrix(theta)
        k = self.k
        eye = np.eye(k)
        m = np.zeros(k)
        P = eye.copy()
        total = 0.0
        for t in range(y.shape[0]):
            if t > 0:
                m = A @ m
                P = A @ P @ A.T + eye
            S = P + eye
            e = y[t] - m
            L = np.linalg.cholesky(S)
            z = np.linalg.solve(L, e)
            total -= 0.5 * (k * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + z @ z)
            G = np.linalg.solve(S, P).T  # P S^{-1}; S symmetric
            m = m + G @ e
            P = P - G @ P
            P = 0.5 * (P + P.T)
        return float(total)

    def pf_step(self, theta, y_t, x_prev, v):
        """Bootstrap move; returns ``(x_new, log_w)`` for ``N`` particles."""
        if x_prev is None:
            x = np.array(v, dtype=float)
        else:
            x = x_prev @ self.transition_matrix(theta).T + v
        r = y_t - x
        log_w = -0.5 * (self.k * LOG_2PI + np.einsum("ij,ij->i", r, r))
        return x, log_w

    def pf_kernel(self, theta, v1):
        """Arguments for the compiled particle filter: ``(kind, params, x_1)``."""
        par = np.append(self.transition_matrix(theta).ravel(), 0.0)
        return 0, par, np.ascontiguousarray(v1, dtype=float)

    def sample_states(self, theta, T, n, rng):
        """``n`` prior draws of the state path, shape (T, n, k); used for pilot statistics."""
        A = self.transition_matrix(theta)
        x = np.empty((T, n, self.k))
        x[0] = rng.standard_normal((n, self.k))
        for t in range(1, T):
            x[t] = x[t - 1] @ A.T + rng.standard_normal((n, self.k))
        return x


@dataclass(frozen=True)
class HestonParams:
    mu: float
    upsilon: float
    omega: float
    chi: float

    @property
    def phi(self):
        """Persistence ``exp(-upsilon)`` reported in output tables."""
        return math.exp(-self.upsilon)


# numpy float semantics: degenerate paths become inf/nan and get zero weight
@numba.njit(cache=True, error_model="numpy")
def _heston_paths(x0, eta, mu, upsilon, omega, eps):
    """Run ``I`` Euler substeps per particle; return end state, sigma2_hat, gamma_hat."""
    n, I = eta.shape
    x_end = np.empty(n)
    s2 = np.empty(n)
    g = np.empty(n)
    sq_eps = math.sqrt(eps)
    half_w2 = 0.5 * omega * omega
    for j in range(n):
        x = x0[j]
        acc_s2 = 0.0
        acc_g = 0.0
        for i in range(I):
            # one exp per substep: e^x = h^2, e^{-x/2} = 1/h
            h = math.exp(0.5 * x)
            ex = h * h
            emx = 1.0 / ex
            acc_s2 += ex
            acc_g += h * eta[j, i]
            x = x + eps * (upsilon * (mu * emx - 1.0) - half_w2 * emx) \
                + sq_eps * omega / h * eta[j, i]
        x_end[j] = x
        s2[j] = eps * acc_s2
        g[j] = sq_eps * acc_g
    return x_end, s2, g


@dataclass(frozen=True)
class HestonEulerModel:
    """Heston stochastic volatility with leverage, Euler-discretized in ``x = log sigma^2``.

    One observation interval of length ``delta_obs`` is split into ``I`` substeps
    of size ``eps = delta_obs / I``::

        x_{i+1} = x_i + eps * (upsilon * (mu e^{-x_i} - 1) - omega^2/2 e^{-x_i})
                  + sqrt(eps) * omega * e^{-x_i/2} * eta_i

        sigma2_hat = eps * sum_i exp(x_i),  gamma_hat = sqrt(eps) * sum_i exp(x_i/2) eta_i
        Y_s ~ N(chi * gamma_hat, (1 - chi^2) * sigma2_hat)

    Sums run over the left endpoints i = 0..I-1, pairing each ``eta_i`` with the
    state it moves. The inference parameter is unconstrained:
    ``theta = (log mu, log upsilon, log omega, atanh chi)``.

    Each particle uses ``p = I + 1`` normals per step; coordinate 0 draws the
    stationary initial variance (via the gamma quantile of ``Phi(u)``) and is only
    read at the first step.
    """

    mu: float = 1.0
    upsilon: float = 0.05
    omega: float = 0.15
    chi: float = -0.5
    I: int = 10
    delta_obs: float = 1.0
    # log-normal priors on (mu, upsilon, omega): (mean, sd) of the log
    prior_log_mu: tuple = (0.0, 2.0)
    prior_log_upsilon: tuple = (-3.0, 2.0)
    prior_log_omega: tuple = (-2.0, 2.0)

    dim = 4
    state_dim = 1

    def __post_init__(self):
        self.validate(self.natural)

    @property
    def aux_dim(self):
        return self.I + 1

    @property
    def eps(self):
        return self.delta_obs / self.I

    @property
    def natural(self):
        return HestonParams(self.mu, self.upsilon, self.omega, self.chi)

    @staticmethod
    def validate(par):
        if not (par.mu > 0 and par.upsilon > 0 and par.omega > 0):
            raise ParameterError("mu, upsilon and omega must be positive")
        if not -1.0 < par.chi < 1.0:
            raise ParameterError(f"chi must lie in (-1, 1), got {par.chi}")

    @staticmethod
    def to_natural(theta):
        th = np.asarray(theta, dtype=float)
        return HestonParams(
            float(np.exp(th[0])), float(np.exp(th[1])), float(np.exp(th[2])), float(np.tanh(th[3]))
        )

    @staticmethod
    def from_natural(par):
        return np.array([math.log(par.mu), math.log(par.upsilon), math.log(par.omega),
                         math.atanh(par.chi)])

    @property
    def true_theta(self):
        return self.from_natural(self.natural)

    def log_prior(self, theta):
        th = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(th)):
            return -math.inf
        lp = 0.0
        for val, (m, s) in zip(th[:3], (self.prior_log_mu, self.prior_log_upsilon,
                                        self.prior_log_omega)):
            lp += float(_norm_logpdf(val, m, s * s))
        # chi ~ U(-1, 1) pushed through tanh
        a = th[3]
        lp += -math.log(2.0) + math.log(4.0) - 2.0 * np.logaddexp(a, -a)
        return lp

    def stationary_shape_rate(self, par=None):
        par = par or self.natural
        rate = 2.0 * par.upsilon / par.omega**2
        return rate * par.mu, rate

    def euler_step(self, x, eta, par=None):
        """One Euler substep of the log-variance (vectorized over ``x``)."""
        par = par or self.natural
        emx = np.exp(-x)
        drift = par.upsilon * (par.mu * emx - 1.0) - 0.5 * par.omega**2 * emx
        return x + self.eps * drift + math.sqrt(self.eps) * par.omega * np.sqrt(emx) * eta

    def _initial_log_variance(self, u, par):
        shape, rate = self.stationary_shape_rate(par)
        # upper-tail form keeps precision for large u
        u = np.asarray(u, dtype=float)
        q = np.where(u > 0, stats.gamma.isf(special.ndtr(-u), shape, scale=1.0 / rate),
                     stats.gamma.ppf(special.ndtr(u), shape, scale=1.0 / rate))
        return np.log(q)

    def simulate(self, T, rng, return_states=False):
        if T < 1:
            raise ParameterError("T must be >= 1")
        par = self.natural
        x = self._initial_log_variance(rng.standard_normal(1), par)
        y = np.empty(T)
        xs = np.empty(T)
        for s in range(T):
            eta = rng.standard_normal((1, self.I))
            x, s2, g = _heston_paths(x, eta, par.mu, par.upsilon, par.omega, self.eps)
            y[s] = par.chi * g[0] + math.sqrt((1.0 - par.chi**2) * s2[0]) * rng.standard_normal()
            xs[s] = x[0]
        return (y, xs) if return_states else y

    def pf_step(self, theta, y_t, x_prev, v):
        par = self.to_natural(theta)
        if x_prev is None:
            x0 = self._initial_log_variance(v[:, 0], par)
        else:
            x0 = np.ascontiguousarray(x_prev[:, 0])
        eta = np.ascontiguousarray(v[:, 1:])
        x_end, s2, g = _heston_paths(x0, eta, par.mu, par.upsilon, par.omega, self.eps)
        with np.errstate(all="ignore"):
            log_w = _norm_logpdf(float(np.ravel(y_t)[0]), par.chi * g, (1.0 - par.chi**2) * s2)
        log_w[~np.isfinite(log_w) | ~np.isfinite(x_end)] = -np.inf
        return x_end[:, None], log_w

    def pf_kernel(self, theta, v1):
        """Arguments for the compiled particle filter: ``(kind, params, x_0)``."""
        par = self.to_natural(theta)
        x0 = self._initial_log_variance(v1[:, 0], par)
        arr = np.array([par.mu, par.upsilon, par.omega, par.chi, self.eps])
        return 1, arr, np.ascontiguousarray(x0.reshape(-1, 1))

    def sample_states(self, theta, T, n, rng):
        par = self.to_natural(theta)
        x = self._initial_log_variance(rng.standard_normal(n), par)
        out = np.empty((T, n, 1))
        for s in range(T):
            eta = rng.standard_normal((n, self.I))
            x, _, _ = _heston_paths(x, eta, par.mu, par.upsilon, par.omega, self.eps)
            out[s, :, 0] = x
        return out

    def exact_loglik(self, theta, y):
        raise CapabilityError("the Heston-Euler model has no closed-form likelihood")


def rw_propose(theta, step_cov, rng):
    """Symmetric Gaussian random-walk proposal ``theta + L xi`` with ``L L^T = step_cov``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cov = np.atleast_2d(np.asarray(step_cov, dtype=float))
    if cov.shape != (theta.size, theta.size):
        raise ParameterError(f"step_cov shape {cov.shape} does not match theta of size {theta.size}")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("step covariance is not positive definite") from exc
    return theta + L @ rng.standard_normal(theta.size)


def write_observations(path, y, header_comment=None):
    """Write ``y`` as CSV with header ``t,y1,...,yk`` (t is 1-based)."""
    y = np.asarray(y, dtype=float)
    y2 = y.reshape(len(y), -1)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\r\n")
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["t"] + [f"y{j + 1}" for j in range(y2.shape[1])])
        for t, row in enumerate(y2, start=1):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_observations(path):
    """Inverse of :func:`write_observations`; returns shape (T,) for k = 1 else (T, k)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "t" or any(h != f"y{j + 1}" for j, h in enumerate(header[1:])):
        raise DataError(f"unexpected observation header {header}")
    y = np.array([[float(v) for v in r[1:]] for r in body if r])
    if not np.all(np.isfinite(y)):
        raise DataError("observations contain non-finite values")
    return y[:, 0] if y.shape[1] == 1 else y
