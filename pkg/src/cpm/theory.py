"""Limiting-regime formulas for the correlated pseudo-marginal kernel.

When the log-likelihood ratio error ``R`` is ``N(-kappa^2/2, kappa^2)``, the
average acceptance factor is ``rho_u(kappa) = 2 Phi(-kappa/2)``. The kernel is
then dominated by a lazy exact-likelihood kernel ``Q*`` that moves with
probability ``rho_u(kappa)``; its relative inefficiency (RIF) and the
computing-time proxy ``ARCT = sqrt(RIF / (kappa^2 rho_u))`` are minimized in
``kappa`` by :func:`minimize_arct`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import ParameterError

__all__ = [
    "IF_INFINITE",
    "std_normal_cdf",
    "rho_u",
    "rho_pm",
    "rif_qstar",
    "arct",
    "minimize_arct",
    "qstar_if_closed",
    "CurvePoint",
    "curve",
    "penalty_step",
    "run_penalty_chain",
    "qstar_if",
]


class _InfiniteIF:
    """Marker for the limit of an exact-kernel inefficiency growing without bound."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "IF_INFINITE"

    def __reduce__(self):
        return (_InfiniteIF, ())


IF_INFINITE = _InfiniteIF()


def _check_if(if_ex):
    if if_ex is IF_INFINITE:
        return None
    if_ex = float(if_ex)
    if not if_ex >= 1.0 or math.isinf(if_ex):
        raise ParameterError("if_ex must be a finite value >= 1 or IF_INFINITE")
    return if_ex


def std_normal_cdf(x):
    """``Phi(x)`` via ``erfc``, accurate in both tails."""
    return 0.5 * special.erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def rho_u(kappa):
    """Limiting acceptance factor ``2 Phi(-kappa/2)``."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ParameterError("kappa must be >= 0")
    out = special.erfc(kappa / (2.0 * math.sqrt(2.0)))
    return float(out) if out.ndim == 0 else out


def rho_pm(sigma):
    """Limiting pseudo-marginal acceptance factor ``2 Phi(-sigma/sqrt(2))``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ParameterError("sigma must be >= 0")
    out = special.erfc(sigma / 2.0)
    return float(out) if out.ndim == 0 else out


def rif_qstar(kappa, if_ex):
    """Relative inefficiency of the lazy kernel ``Q*``.

    ``((1 + IF) / rho_u - 1) / IF`` for finite ``IF`` and ``1 / rho_u`` for
    ``IF_INFINITE``.
    """
    r = rho_u(kappa)
    i = _check_if(if_ex)
    if i is None:
        return 1.0 / r
    return ((1.0 + i) / r - 1.0) / i


def arct(kappa, if_ex):
    """Auxiliary relative computing time ``sqrt(RIF / (kappa^2 rho_u))``."""
    if kappa <= 0:
        raise ParameterError("ARCT is infinite at kappa = 0")
    return math.sqrt(rif_qstar(kappa, if_ex) / (kappa * kappa * rho_u(kappa)))


def minimize_arct(if_ex, bounds=(0.1, 5.0), xatol=1e-4):
    """Minimizer ``kappa*`` of :func:`arct` on ``bounds`` for a given exact-kernel IF."""
    _check_if(if_ex)
    res = optimize.minimize_scalar(lambda k: arct(k, if_ex), bounds=bounds, method="bounded",
                                   options={"xatol": xatol})
    return float(res.x)


def qstar_if_closed(if_ex, kappa):
    """``IF(h, Q*) = (1 + IF(h, Q_EX)) / rho_u(kappa) - 1``."""
    return (1.0 + float(if_ex)) / rho_u(kappa) - 1.0


@dataclass(frozen=True)
class CurvePoint:
    kappa: float
    rho_u: float
    rif_if1: float
    rif_inf: float
    arct_if1: float
    arct_inf: float


def curve(kappas):
    """Curve points for each ``kappa`` (IF = 1 and the infinite-IF limit)."""
    return [CurvePoint(float(k), rho_u(k), rif_qstar(k, 1), rif_qstar(k, IF_INFINITE),
                       arct(k, 1), arct(k, IF_INFINITE)) for k in kappas]


# --------------------------------------------------------------------------
# limiting chains


def penalty_step(theta, kappa, sigma_bar, proposal, rng, log_target=None):
    """One step of the penalty chain on ``N(0, sigma_bar)``.

    The exact log acceptance ratio is perturbed by ``w ~ N(-kappa^2/2, kappa^2)``
    drawn fresh for each proposal. Since ``E[exp(w)] = 1`` the target is
    preserved.

    Parameters
    ----------
    theta : ndarray
    kappa : float
    sigma_bar : ndarray
        Target covariance (positive definite).
    proposal : object
        Has ``propose(theta, rng)`` and ``log_ratio(theta, theta_new)``.
    rng : numpy.random.Generator
    log_target : callable, optional
        Overrides the Gaussian target log-density.

    Returns
    -------
    (ndarray, bool)
    """
    if log_target is None:
        prec = np.linalg.inv(np.atleast_2d(sigma_bar))

        def log_target(x):
            x = np.atleast_1d(x)
            return -0.5 * x @ prec @ x

    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    theta_new = np.atleast_1d(proposal.propose(theta, rng))
    w = rng.normal(-0.5 * kappa * kappa, kappa)
    log_alpha = log_target(theta_new) - log_target(theta) + proposal.log_ratio(theta, theta_new) + w
    if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
        return theta_new, True
    return theta, False


def run_penalty_chain(theta0, kappa, sigma_bar, proposal, n, rng):
    """``n`` penalty-chain states; returns ``(draws (n, d), accepted (n,))``."""
    prec = np.linalg.inv(np.atleast_2d(sigma_bar))

    def log_target(x):
        return -0.5 * x @ prec @ x

    theta = np.atleast_1d(np.asarray(theta0, dtype=float))
    out = np.empty((n, theta.size))
    acc = np.zeros(n, dtype=bool)
    for i in range(n):
        theta, acc[i] = penalty_step(theta, kappa, sigma_bar, proposal, rng, log_target)
        out[i] = theta
    return out, acc


def qstar_if(exact_step, x0, kappa, n, rng, h=None, iact_fn=None):
    """Simulated ``IF(h, Q*)`` for the lazy version of ``exact_step``.

    Each iteration flips a ``rho_u(kappa)`` coin and, on success, applies
    ``exact_step(x, rng)``; otherwise the state is repeated.

    Returns
    -------
    float
        IACT of ``h`` along the simulated ``Q*`` chain.
    """
    from .diagnostics import iact

    if iact_fn is None:
        iact_fn = iact
    if h is None:
        h = float
    r = rho_u(kappa)
    x = x0
    vals = np.empty(n)
    for i in range(n):
        if rng.random() < r:
            x = exact_step(x, rng)
        vals[i] = h(x)
    return iact_fn(vals)
