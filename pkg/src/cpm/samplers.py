"""Metropolis-Hastings kernels over a common chain state.

* :func:`mh_exact_step` uses the exact likelihood.
* :func:`cpm_step` is the correlated pseudo-marginal move: ``theta`` is proposed
  from ``q``, the auxiliary block from the autoregressive kernel, and the pair is
  accepted with the estimated likelihood ratio.
* :func:`pm_step` is ``cpm_step`` with ``rho = 0``.

:func:`run_chain` drives any of them with one counter-based random stream per
iteration, so a chain is reproducible bit for bit from ``(seed, chain_id)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .auxvars import _as_rho, cn_step, sample_fresh, stream
from .estimators import ISEstimator, PFEstimator, bind, pilot_logistic_params
from .errors import ChainAborted, DegenerateEstimateError, ParameterError

__all__ = [
    "ChainState",
    "KernelConfig",
    "Target",
    "RandomWalk",
    "Autoregressive",
    "FixedTheta",
    "TraceRecord",
    "ChainTrace",
    "NDJSONSink",
    "mh_exact_step",
    "cpm_step",
    "pm_step",
    "init_state",
    "make_kernel",
    "run_chain",
    "build_target",
]


# --------------------------------------------------------------------------
# proposals


class RandomWalk:
    """Gaussian random walk ``theta' = theta + L xi`` with ``L L^T = cov``."""

    symmetric = True

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ParameterError("step covariance must be square")
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ParameterError("step covariance is not positive definite") from None
        self.cov = cov

    def propose(self, theta, rng):
        return theta + self.chol @ rng.standard_normal(len(theta))

    def log_ratio(self, theta, theta_new):
        return 0.0


class Autoregressive:
    """``theta' = m + a (theta - m) + sqrt(1 - a^2) L xi``, reversible for ``N(m, cov)``."""

    symmetric = False

    def __init__(self, mean, cov, a):
        if not -1.0 < a < 1.0:
            raise ParameterError("autoregressive coefficient must lie in (-1, 1)")
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ParameterError("proposal covariance is not positive definite") from None
        self.prec = np.linalg.inv(self.cov)
        self.a = float(a)

    def propose(self, theta, rng):
        xi = rng.standard_normal(len(theta))
        return self.mean + self.a * (theta - self.mean) + math.sqrt(1 - self.a**2) * (self.chol @ xi)

    def log_ratio(self, theta, theta_new):
        # log q(theta', theta) - log q(theta, theta') = log N(theta) - log N(theta')
        d0 = theta - self.mean
        d1 = theta_new - self.mean
        return -0.5 * (d0 @ self.prec @ d0 - d1 @ self.prec @ d1)


class FixedTheta:
    """Never moves ``theta``; used for the auxiliary-only chain at a fixed parameter."""

    symmetric = True

    def propose(self, theta, rng):
        return theta

    def log_ratio(self, theta, theta_new):
        return 0.0


# --------------------------------------------------------------------------
# state, config, target


@dataclass(frozen=True, eq=False)
class ChainState:
    """Position of a chain on the extended space.

    ``log_est`` caches ``log p_hat(y | theta, u)`` (or the exact log-likelihood
    when ``u`` is None) and ``log_prior`` caches the prior log-density.
    """

    theta: np.ndarray
    u: object
    log_est: float
    log_prior: float


@dataclass(frozen=True)
class KernelConfig:
    """Proposal, correlation and run lengths for a kernel."""

    proposal: object
    rho: object = 0.0
    n_iters: int = 1000
    burn_in: int = 0

    def __post_init__(self):
        if int(self.n_iters) < 1:
            raise ParameterError("n_iters must be >= 1")
        if self.burn_in < 0:
            raise ParameterError("burn_in must be >= 0")
        _as_rho(self.rho)

    @property
    def rho_value(self):
        return _as_rho(self.rho)


class Target:
    """Prior, likelihood estimator and (optional) exact likelihood for one data set."""

    def __init__(self, model, y, estimator=None):
        self.model = model
        self.y = np.asarray(y, dtype=float)
        self.estimator = estimator

    @property
    def layout(self):
        return self.estimator.layout

    def log_prior(self, theta):
        return float(self.model.log_prior(theta))

    def loglik_hat(self, theta, u):
        return self.estimator.loglik(theta, u).value

    def loglik_exact(self, theta):
        return float(self.model.exact_loglik(theta, self.y))


def init_state(target, theta, rng=None, exact=False):
    """Build a cache-coherent state at ``theta`` with a fresh auxiliary block."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float)).copy()
    lp = target.log_prior(theta)
    if exact:
        return ChainState(theta, None, target.loglik_exact(theta), lp)
    if rng is None:
        rng = np.random.default_rng(0)
    u = sample_fresh(target.layout, rng)
    return ChainState(theta, u, target.loglik_hat(theta, u), lp)


@dataclass(frozen=True)
class TraceRecord:
    theta: np.ndarray
    accepted: bool
    logp_cur: float
    logp_prop: float
    degenerate: bool = False


def _accept(log_alpha, rng):
    if not log_alpha < 0.0:
        return not math.isnan(log_alpha)
    return math.log(rng.random()) < log_alpha


# --------------------------------------------------------------------------
# kernels


def mh_exact_step(state, target, config, rng):
    """One Metropolis-Hastings step with the exact likelihood.

    Returns
    -------
    (ChainState, bool)
    """
    prop = config.proposal
    theta_new = prop.propose(state.theta, rng)
    lp_new = target.log_prior(theta_new)
    if lp_new == -math.inf:
        return state, False
    ll_new = target.loglik_exact(theta_new)
    log_alpha = (ll_new - state.log_est) + (lp_new - state.log_prior) \
        + prop.log_ratio(state.theta, theta_new)
    if _accept(log_alpha, rng):
        return ChainState(theta_new, None, ll_new, lp_new), True
    return state, False


def cpm_step(state, target, config, rng):
    """One correlated pseudo-marginal step.

    Random numbers are consumed in a fixed order from ``rng``: the parameter
    proposal, the auxiliary innovation, then the acceptance uniform.

    Returns
    -------
    (ChainState, bool, TraceRecord)
        A degenerate proposed estimate is rejected and flagged in the record.
    """
    prop = config.proposal
    theta_new = prop.propose(state.theta, rng)
    u_new = cn_step(state.u, config.rho, rng)
    lp_new = target.log_prior(theta_new)
    degenerate = False
    ll_new = -math.inf
    if lp_new > -math.inf:
        try:
            ll_new = target.loglik_hat(theta_new, u_new)
        except DegenerateEstimateError:
            degenerate = True
    log_alpha = (ll_new - state.log_est) + (lp_new - state.log_prior) \
        + prop.log_ratio(state.theta, theta_new)
    acc = ll_new > -math.inf and _accept(log_alpha, rng)
    if acc:
        new_state = ChainState(theta_new, u_new, ll_new, lp_new)
    else:
        new_state = state
    rec = TraceRecord(new_state.theta, acc, state.log_est, ll_new, degenerate)
    return new_state, acc, rec


def pm_step(state, target, config, rng):
    """Pseudo-marginal step: :func:`cpm_step` with a fresh auxiliary block."""
    return cpm_step(state, target, replace(config, rho=0.0), rng)


def make_kernel(target, config, exact=False):
    """Return ``step(state, rng) -> (state, accepted, TraceRecord)``."""
    if exact:
        def step(state, rng):
            ll_cur = state.log_est
            new, acc = mh_exact_step(state, target, config, rng)
            return new, acc, TraceRecord(new.theta, acc, ll_cur, new.log_est if acc else math.nan)
        return step

    def step(state, rng):
        return cpm_step(state, target, config, rng)
    return step


# --------------------------------------------------------------------------
# driver and sinks


@dataclass
class ChainTrace:
    """Per-iteration history of a chain (state after each move)."""

    theta: np.ndarray
    accepted: np.ndarray
    logp_cur: np.ndarray
    logp_prop: np.ndarray
    degenerate: np.ndarray
    psi: np.ndarray | None = None
    final: ChainState | None = None
    complete: bool = True
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.accepted)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted))

    def after(self, burn_in):
        """Copy of the trace with the first ``burn_in`` iterations dropped."""
        sl = slice(burn_in, None)
        return ChainTrace(self.theta[sl], self.accepted[sl], self.logp_cur[sl],
                          self.logp_prop[sl], self.degenerate[sl],
                          None if self.psi is None else self.psi[sl], self.final, self.complete,
                          {k: v[sl] for k, v in self.extras.items()})


class NDJSONSink:
    """Writes one JSON object per iteration to a text file."""

    def __init__(self, path_or_file):
        if hasattr(path_or_file, "write"):
            self._fh = path_or_file
            self._own = False
        else:
            self._fh = open(path_or_file, "w", encoding="utf-8", newline="\n")
            self._own = True

    def write(self, it, rec):
        line = {"iter": it, "theta": [float(v) for v in np.atleast_1d(rec.theta)],
                "acc": int(rec.accepted), "logp_cur": _json_float(rec.logp_cur),
                "logp_prop": _json_float(rec.logp_prop)}
        self._fh.write(json.dumps(line, separators=(",", ":")) + "\n")

    def abort(self, it):
        self._fh.write(json.dumps({"aborted": True, "iter": it}) + "\n")

    def close(self):
        if self._own:
            self._fh.close()


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def run_chain(initial, kernel, n_iters, sinks=(), seed=0, chain_id=0, psi_fn=None,
              callback=None):
    """Apply ``kernel`` ``n_iters`` times starting from ``initial``.

    Parameters
    ----------
    initial : ChainState
    kernel : callable
        ``kernel(state, rng) -> (state, accepted, TraceRecord)``, see :func:`make_kernel`.
    n_iters : int
    sinks : sequence
        Objects with ``write(iter, record)``; an exception raised by a sink
        aborts the run with :class:`ChainAborted` carrying the partial trace.
    seed, chain_id : int
        Iteration ``n`` draws from ``stream(seed, chain_id, n)``.
    psi_fn : callable, optional
        ``psi_fn(state) -> array`` recorded after every move.
    callback : callable, optional
        ``callback(n, state, record)``, e.g. for extra per-iteration statistics.

    Returns
    -------
    ChainTrace
    """
    n_iters = int(n_iters)
    if n_iters < 1:
        raise ParameterError("n_iters must be >= 1")
    d = len(initial.theta)
    theta = np.empty((n_iters, d))
    acc = np.zeros(n_iters, dtype=bool)
    lcur = np.empty(n_iters)
    lprop = np.empty(n_iters)
    degen = np.zeros(n_iters, dtype=bool)
    psi = None
    state = initial
    for n in range(n_iters):
        rng = stream(seed, chain_id, n)
        state, a, rec = kernel(state, rng)
        theta[n] = state.theta
        acc[n] = a
        lcur[n] = rec.logp_cur
        lprop[n] = rec.logp_prop
        degen[n] = rec.degenerate
        if psi_fn is not None:
            val = np.atleast_1d(psi_fn(state))
            if psi is None:
                psi = np.empty((n_iters, len(val)))
            psi[n] = val
        if callback is not None:
            callback(n, state, rec)
        for s in sinks:
            try:
                s.write(n, rec)
            except Exception as exc:
                trace = ChainTrace(theta[: n + 1], acc[: n + 1], lcur[: n + 1], lprop[: n + 1],
                                   degen[: n + 1], None if psi is None else psi[: n + 1],
                                   state, complete=False)
                for other in sinks:
                    try:
                        other.abort(n)
                    except Exception:
                        pass
                raise ChainAborted(f"trace sink failed at iteration {n}: {exc}", trace) from exc
    return ChainTrace(theta, acc, lcur, lprop, degen, psi, state)



def build_target(model, y, N, theta_pilot=None, hilbert_order=16, seed=0):
    """Target with the natural estimator for ``model``.

    Importance sampling when the model has per-observation weights, otherwise the
    Hilbert-sorted particle filter with logistic parameters from a pilot run at
    ``theta_pilot``.
    """
    y = np.asarray(y, dtype=float)
    if hasattr(model, "is_log_weights"):
        est = ISEstimator(int(N))
    else:
        if theta_pilot is None:
            theta_pilot = getattr(model, "true_theta", None)
            if theta_pilot is None:
                theta_pilot = np.array([model.theta])
        loc, scale = pilot_logistic_params(model, theta_pilot, min(len(y), 200), seed=seed)
        est = PFEstimator(int(N), loc, scale, hilbert_order)
    return Target(model, y, bind(est, model, y))
