"""Experiment pipelines used by the command-line harness and the acceptance tests.

Each pipeline is a plain function of explicit arguments and seeds, so results
are reproducible and the CLI only has to parse configuration and write files.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .auxvars import sample_fresh, stream
from .diagnostics import iact, loglik_error_samples
from .errors import ParameterError
from .models import GaussianREModel, HestonEulerModel, LinearGaussianSSM
from .samplers import (Autoregressive, KernelConfig, RandomWalk, build_target, init_state,
                       make_kernel, run_chain)
from .theory import rho_pm, rho_u
from .tuning import ScalingPlan, default_step_cov, laplace_approximation

log = logging.getLogger(__name__)

__all__ = [
    "make_model",
    "simulate_data",
    "central_estimate",
    "pilot_moments",
    "make_proposal",
    "TableRow",
    "scaling_table",
    "TABLE_PRESETS",
]

# purpose tags for the random streams derived from the experiment seed
DATA_STREAM = 1
INIT_STREAM = 2
PILOT_STREAM = 3

# correlation rate for Heston pilot runs; gives kappa^2 near 1.4 at T=500, N=23
HESTON_PSI = 0.15


def make_model(spec):
    """Model from a ``{"type": ..., **params}`` mapping."""
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "gaussian_re":
        return GaussianREModel(**spec)
    if kind == "lgssm":
        if "prior_bounds" in spec:
            spec["prior_bounds"] = tuple(spec["prior_bounds"])
        return LinearGaussianSSM(**spec)
    if kind == "heston":
        for key in ("prior_log_mu", "prior_log_upsilon", "prior_log_omega"):
            if key in spec:
                spec[key] = tuple(spec[key])
        return HestonEulerModel(**spec)
    raise ParameterError(f"unknown model type {kind!r}")


def true_theta(model):
    """Data-generating parameter in the sampler's parameterization."""
    if isinstance(model, HestonEulerModel):
        return model.true_theta
    return np.array([model.theta], dtype=float)


def simulate_data(model, T, seed):
    return model.simulate(T, stream(seed, DATA_STREAM))


def central_estimate(model, y, seed=0, pilot_N=None):
    """Posterior mode and covariance used to center proposals and diagnostics.

    The conjugate closed form is used for the random-effects model and a
    Laplace approximation of the exact posterior for the linear state-space
    model. For the Heston model a coarse Laplace approximation of a
    fixed-block particle-filter surrogate seeds a few pilot correlated chains,
    whose mean and covariance are returned.

    Returns
    -------
    (ndarray, ndarray)
        ``theta_hat`` and posterior covariance (``sigma_bar / T``).
    """
    y = np.asarray(y, dtype=float)
    if isinstance(model, GaussianREModel):
        m, sd = model.posterior(y)
        return np.array([m]), np.array([[sd * sd]])
    if isinstance(model, LinearGaussianSSM):
        def lp(th):
            v = model.log_prior(th)
            return v + model.exact_loglik(th, y) if v > -math.inf else -1e300
        return laplace_approximation(lp, true_theta(model))
    T = len(y)
    N = pilot_N or math.ceil(math.sqrt(T))
    target = build_target(model, y, N, true_theta(model), seed=seed)
    u = sample_fresh(target.layout, stream(seed, PILOT_STREAM))

    def lp(th):
        v = model.log_prior(th)
        if v == -math.inf:
            return -1e300
        try:
            return v + target.loglik_hat(th, u)
        except ArithmeticError:
            return -1e300
    # the surrogate is rough at small scales, so the curvature uses a wide step
    th0, cov0 = laplace_approximation(lp, true_theta(model), h=0.1)
    if not np.all(np.linalg.eigvalsh(cov0) > 0):
        cov0 = 0.01 * np.eye(len(th0))
    return pilot_moments(target, th0, cov0, math.exp(-HESTON_PSI * N / T), seed=seed)


def pilot_moments(target, theta0, cov0, rho, stages=(1000, 2000, 4000), seed=0):
    """Mean and covariance from successive pilot runs of the correlated chain.

    Each stage uses a random walk with ``2.38^2/d`` times the previous stage's
    sample covariance, starting at the previous mean; the first quarter of each
    stage is discarded.
    """
    th = np.atleast_1d(np.asarray(theta0, dtype=float))
    cov = np.atleast_2d(cov0)
    for k, n in enumerate(stages):
        cfg = KernelConfig(RandomWalk(default_step_cov(cov)), rho, n)
        st = init_state(target, th, stream(seed, PILOT_STREAM, k + 1))
        tr = run_chain(st, make_kernel(target, cfg), n, seed=seed, chain_id=1000 + k)
        tr = tr.after(n // 4)
        log.info("pilot stage %d: acceptance %.3f", k, tr.acceptance_rate)
        if tr.acceptance_rate < 0.02:
            cov = cov / 10.0
            continue
        th = tr.theta.mean(axis=0)
        cov = np.atleast_2d(np.cov(tr.theta, rowvar=False))
    return th, cov


def make_proposal(kind, theta_hat, post_cov, scale=1.0, ar_coef=0.9):
    """``rw``: random walk with ``scale * 2.38^2/d`` posterior covariance;
    ``ar``: autoregressive around ``theta_hat`` with the posterior covariance."""
    if kind == "rw":
        return RandomWalk(scale * default_step_cov(post_cov))
    if kind == "ar":
        return Autoregressive(theta_hat, post_cov, ar_coef)
    raise ParameterError(f"unknown proposal {kind!r}")


@dataclass(frozen=True)
class TableRow:
    T: int
    N: int
    delta: float
    kappa_sq: float
    sigma_sq: float
    rho_cpm: float
    rho_pm: float
    rho: float
    if_cpm: float = math.nan
    acc_cpm: float = math.nan

    FIELDS = ("T", "N", "delta", "kappa_sq", "sigma_sq", "rho_cpm", "rho_pm", "rho",
              "if_cpm", "acc_cpm")

    def as_list(self):
        return [getattr(self, f) for f in self.FIELDS]


# published particle counts per T; these truncate beta T^alpha rather than round up
TABLE_PRESETS = {
    "re_scaling": dict(model={"type": "gaussian_re", "theta": 0.5}, alpha=0.5, beta=0.6,
                       psi=0.56, T_grid=[1024, 2048, 4096, 8192],
                       N={1024: 19, 2048: 28, 4096: 39, 8192: 56, 16384: 79}),
    "ssm_k2": dict(model={"type": "lgssm", "k": 2, "theta": 0.4}, alpha=2 / 3, beta=0.854,
                   psi=0.12, T_grid=[100, 400],
                   N={100: 18, 400: 46, 1600: 116, 6400: 294, 25600: 742}),
    "ssm_k3": dict(model={"type": "lgssm", "k": 3, "theta": 0.4}, alpha=3 / 4, beta=1.57,
                   psi=0.042, T_grid=[100, 400],
                   N={100: 49, 400: 140, 1600: 397, 6400: 1124, 25600: 3181}),
}


def _table_row(model, y, T, j, alpha, beta, psi, seed, kappa_iters, sigma_iters, chain_iters,
               n_fixed, at_truth):
    theta_hat, post_cov = central_estimate(model, y, seed)
    if at_truth:
        theta_hat = true_theta(model)
    plan = ScalingPlan(T, alpha, beta, psi, theta_hat, n_fixed=n_fixed)
    target = build_target(model, y, plan.N, theta_hat, seed=seed)
    es = loglik_error_samples(target, theta_hat, plan.rho, kappa_iters, seed=seed,
                              chain_id=10 * j)
    esm = loglik_error_samples(target, theta_hat, plan.rho, sigma_iters, mode="proposal_m",
                               seed=seed, chain_id=10 * j + 1)
    k2, s2 = es.kappa_sq, esm.sigma_sq
    if_cpm = acc = math.nan
    if chain_iters:
        cfg = KernelConfig(make_proposal("rw", theta_hat, post_cov), plan.rho, chain_iters)
        st = init_state(target, theta_hat, stream(seed, INIT_STREAM, j))
        tr = run_chain(st, make_kernel(target, cfg), chain_iters, seed=seed,
                       chain_id=10 * j + 2).after(chain_iters // 10)
        if_cpm, acc = iact(tr.theta[:, 0]), tr.acceptance_rate
    row = TableRow(T, plan.N, plan.delta, k2, s2, rho_u(math.sqrt(k2)), rho_pm(math.sqrt(s2)),
                   plan.rho, if_cpm, acc)
    log.info("table row %s", row)
    return row


def scaling_table(model, T_grid, alpha, beta, psi, seed=0, kappa_iters=1000, sigma_iters=1000,
                  chain_iters=0, n_override=None, nested=True, at_truth=None, jobs=1):
    """Rows ``(T, N, delta, kappa^2, sigma^2, rho_cpm, rho_pm, ...)`` for each ``T``.

    ``kappa^2`` is measured on the auxiliary-only chain at the central value,
    ``sigma^2`` from fresh draws. With ``chain_iters > 0`` a full correlated
    chain is also run to report its inefficiency and acceptance rate.

    Parameters
    ----------
    nested : bool
        Use prefixes of one simulated series of length ``max(T_grid)``.
    n_override : dict, optional
        ``{T: N}`` for rows whose particle count is fixed externally.
    at_truth : bool, optional
        Measure at the data-generating parameter instead of the posterior mode.
        Defaults to True for the state-space model.
    jobs : int
        Rows run in up to ``jobs`` worker processes; results do not depend on it.
    """
    T_grid = [int(t) for t in T_grid]
    if nested:
        y_all = simulate_data(model, max(T_grid), seed)
    if at_truth is None:
        at_truth = isinstance(model, LinearGaussianSSM)
    n_override = {int(k): int(v) for k, v in (n_override or {}).items()}
    args = [(model, y_all[:T] if nested else simulate_data(model, T, seed + j), T, j, alpha,
             beta, psi, seed, kappa_iters, sigma_iters, chain_iters, n_override.get(T), at_truth)
            for j, T in enumerate(T_grid)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_table_row, *zip(*args)))
    return [_table_row(*a) for a in args]
