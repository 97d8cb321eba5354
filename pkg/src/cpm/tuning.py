"""Choosing the number of particles and the correlation.

With ``N = ceil(beta T^alpha)`` and ``rho = exp(-psi N / T)`` the variance of
the log-likelihood ratio error stays roughly constant in ``T``. The procedure is:

1. find a central value ``theta_hat`` and curvature ``sigma_bar``;
2. at a pilot ``N``, calibrate ``psi`` so that the stationary ``kappa_hat`` hits
   a target (1.4 by default);
3. measure ``CT = N x IF`` over a grid of ``beta``, fit ``CT(beta) = c0/beta + c1 beta``
   and pick ``beta_hat = sqrt(c0 / c1)``.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .diagnostics import iact, loglik_error_samples
from .errors import CalibrationRangeError, ParameterError
from .samplers import KernelConfig, RandomWalk, build_target, init_state, make_kernel, run_chain

log = logging.getLogger(__name__)

__all__ = [
    "ScalingPlan",
    "laplace_approximation",
    "default_step_cov",
    "estimate_kappa",
    "calibrate_psi",
    "CTFit",
    "fit_ct_curve",
    "CTMeasurement",
    "measure_ct",
    "write_tuning_report",
]


@dataclass(frozen=True)
class ScalingPlan:
    """``N = ceil(beta T^alpha)``, ``delta = psi N / T``, ``rho = exp(-delta)``.

    ``theta_hat`` and ``sigma_bar`` (posterior mode and ``T`` times the posterior
    covariance) are optional pilot quantities. ``n_fixed`` overrides the
    particle count, e.g. to reproduce a published row.
    """

    T: int
    alpha: float = 0.5
    beta: float = 1.0
    psi: float = 1.0
    theta_hat: object = None
    sigma_bar: object = None
    n_fixed: int | None = None

    def __post_init__(self):
        if self.T < 1 or self.beta <= 0 or self.psi <= 0:
            raise ParameterError("T >= 1, beta > 0 and psi > 0 are required")
        if self.n_fixed is not None and self.n_fixed < 1:
            raise ParameterError("n_fixed must be >= 1")

    @property
    def N(self):
        if self.n_fixed is not None:
            return int(self.n_fixed)
        # round first so that e.g. 0.5 * 64**0.5 is not pushed up by float noise
        return max(1, math.ceil(round(self.beta * self.T**self.alpha, 9)))

    @property
    def delta(self):
        return self.psi * self.N / self.T

    @property
    def rho(self):
        return math.exp(-self.delta)

    def with_(self, **kw):
        return replace(self, **kw)


def laplace_approximation(log_post, x0, h=1e-4):
    """Mode of ``log_post`` and the inverse negative Hessian there.

    The Hessian is taken by central finite differences with step ``h``.

    Returns
    -------
    (ndarray, ndarray)
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    res = optimize.minimize(lambda x: -log_post(x), x0, method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 20000})
    m = res.x
    d = len(m)
    H = np.empty((d, d))
    f0 = log_post(m)
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            if i == j:
                H[i, i] = (log_post(m + ei) - 2 * f0 + log_post(m - ei)) / h**2
            else:
                H[i, j] = H[j, i] = (log_post(m + ei + ej) - log_post(m + ei - ej)
                                     - log_post(m - ei + ej) + log_post(m - ei - ej)) / (4 * h * h)
    cov = np.linalg.inv(-H)
    return m, 0.5 * (cov + cov.T)


def default_step_cov(post_cov):
    """Random-walk covariance ``2.38^2 / d`` times the posterior covariance."""
    post_cov = np.atleast_2d(post_cov)
    return (2.38**2 / post_cov.shape[0]) * post_cov


def estimate_kappa(target, theta_hat, rho, n=20000, seed=0, chain_id=0, burn_in=None):
    """``kappa_hat`` from ``n`` stationary draws of ``R`` at ``theta_hat``."""
    es = loglik_error_samples(target, theta_hat, rho, n, mode="stationary", seed=seed,
                              chain_id=chain_id, burn_in=burn_in)
    return math.sqrt(es.kappa_sq)


def calibrate_psi(model, y, plan, target_kappa=1.4, n_samples=20000, tol=0.05,
                  bounds=(1e-4, 1e2), seed=0, max_evals=30, target=None):
    """Find ``psi`` with ``|kappa_hat - target_kappa| < tol`` at ``plan.N``.

    ``kappa_hat^2`` grows roughly linearly with ``psi``, so each step tries the
    proportional update ``psi (target / kappa_hat)^2`` and falls back to
    bisection in ``log psi`` when that leaves the current bracket.

    Returns
    -------
    float

    Raises
    ------
    CalibrationRangeError
        When the target is not bracketed by ``bounds``.
    """
    if plan.theta_hat is None:
        raise ParameterError("plan.theta_hat is required")
    if target is None:
        target = build_target(model, y, plan.N, plan.theta_hat, seed=seed)
    theta_hat = np.atleast_1d(plan.theta_hat)

    def kap(psi, k):
        rho = math.exp(-psi * plan.N / plan.T)
        return estimate_kappa(target, theta_hat, rho, n_samples, seed=seed, chain_id=k)

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    lo_seen = hi_seen = False
    psi = min(max(plan.psi, bounds[0]), bounds[1])
    for k in range(max_evals):
        kh = kap(psi, k)
        log.info("calibrate_psi: psi=%.5g kappa_hat=%.4f", psi, kh)
        if abs(kh - target_kappa) < tol:
            return psi
        if kh < target_kappa:
            if psi >= bounds[1]:
                raise CalibrationRangeError(f"kappa stays below {target_kappa} at psi={bounds[1]}")
            lo, lo_seen = math.log(psi), True
        else:
            if psi <= bounds[0]:
                raise CalibrationRangeError(f"kappa exceeds {target_kappa} even at psi={bounds[0]}")
            hi, hi_seen = math.log(psi), True
        g = math.log(psi) + 2.0 * math.log(target_kappa / max(kh, 1e-3))
        g = min(max(g, lo), hi)
        if (g <= lo and lo_seen) or (g >= hi and hi_seen):
            g = 0.5 * (lo + hi)
        psi = math.exp(g)
    raise CalibrationRangeError(f"no psi in {bounds} reached kappa={target_kappa} +/- {tol}")


@dataclass(frozen=True)
class CTFit:
    c0: float
    c1: float
    beta_hat: float
    residual_norm: float

    def __call__(self, beta):
        beta = np.asarray(beta, dtype=float)
        return self.c0 / beta + self.c1 * beta


def fit_ct_curve(beta_grid, ct):
    """Least-squares fit of ``CT(beta) = c0 / beta + c1 beta``.

    A negative coefficient is clamped to zero (with a warning) and the other
    refitted alone.
    """
    b = np.asarray(beta_grid, dtype=float)
    c = np.asarray(ct, dtype=float)
    if b.shape != c.shape or len(b) < 3:
        raise ParameterError("need at least 3 matching (beta, CT) pairs")
    if np.any(b <= 0) or np.any(c <= 0):
        raise ParameterError("beta and CT must be positive")
    if np.ptp(b) == 0:
        raise ParameterError("singular design: all beta values are equal")
    X = np.column_stack([1.0 / b, b])
    coef, *_ = np.linalg.lstsq(X, c, rcond=None)
    c0, c1 = coef
    if c0 < 0 or c1 < 0:
        warnings.warn("negative CT coefficient clamped to zero", stacklevel=2)
        if c0 < 0:
            c0, c1 = 0.0, float(b @ c / (b @ b))
        else:
            x = 1.0 / b
            c0, c1 = float(x @ c / (x @ x)), 0.0
    beta_hat = math.sqrt(c0 / c1) if c1 > 0 else math.inf
    resid = float(np.linalg.norm(X @ np.array([c0, c1]) - c))
    return CTFit(float(c0), float(c1), beta_hat, resid)


@dataclass(frozen=True)
class CTMeasurement:
    beta: float
    N: int
    rho: float
    kappa_sq: float
    IF: float
    CT: float
    acc: float


def measure_ct(model, y, plan, proposal_cov, n_iters, h=None, seed=0, chain_id=0,
               burn_in=None, kappa_samples=0):
    """Run the correlated chain at ``plan`` and return ``CT = N x IF(h)``.

    Parameters
    ----------
    h : callable, optional
        Monitored function of ``theta``; defaults to the first coordinate.
    kappa_samples : int
        When positive, also estimate ``kappa^2`` at ``plan.theta_hat``.
    """
    theta0 = np.atleast_1d(plan.theta_hat)
    target = build_target(model, y, plan.N, theta0, seed=seed)
    cfg = KernelConfig(RandomWalk(proposal_cov), plan.rho, n_iters)
    state = init_state(target, theta0, np.random.default_rng(seed))
    trace = run_chain(state, make_kernel(target, cfg), n_iters, seed=seed, chain_id=chain_id)
    if burn_in is None:
        burn_in = n_iters // 10
    tr = trace.after(burn_in)
    vals = tr.theta[:, 0] if h is None else np.array([h(t) for t in tr.theta])
    f = iact(vals)
    k2 = math.nan
    if kappa_samples:
        es = loglik_error_samples(target, theta0, plan.rho, kappa_samples, seed=seed,
                                  chain_id=chain_id + 1)
        k2 = es.kappa_sq
    return CTMeasurement(plan.beta, plan.N, plan.rho, k2, f, plan.N * f, tr.acceptance_rate)


def write_tuning_report(path, measurements, fit, header_comment=None):
    """``tuning_report.csv``: one row per beta plus the fitted coefficients."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\r\n")
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["beta", "N", "rho", "kappa_sq", "IF", "CT", "c0", "c1", "beta_hat"])
        for m in measurements:
            w.writerow([repr(m.beta), m.N, repr(m.rho), repr(m.kappa_sq), repr(m.IF), repr(m.CT),
                        repr(fit.c0), repr(fit.c1), repr(fit.beta_hat)])
