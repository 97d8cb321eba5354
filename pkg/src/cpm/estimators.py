"""Likelihood estimators driven by a block of auxiliary normals.

Two estimators are provided:

* importance sampling for random-effects models, one independent factor per
  observation, ``p_hat = prod_t mean_i w(y_t, U_{t,i}; theta)``;
* a particle filter whose resampling step sorts the particles along a Hilbert
  curve and uses one common uniform per step (systematic resampling), so that
  the selected ancestors move continuously with ``(theta, U)``.

Both are deterministic functions of ``(theta, U)`` and work in the log domain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import special

from .auxvars import AuxLayout
from .errors import CapabilityError, DegenerateEstimateError, ParameterError
from .hilbert import _hilbert_index_rows, hilbert_key
from .models import _heston_paths

__all__ = [
    "LoglikEstimate",
    "ISEstimator",
    "PFEstimator",
    "BoundEstimator",
    "is_loglik",
    "is_score",
    "pf_loglik",
    "sorted_systematic_resample",
    "pilot_logistic_params",
    "bind",
]

# rows of the (T, N) weight matrix processed at once by the IS estimator
_IS_CHUNK_ELEMS = 1 << 20


@dataclass(frozen=True)
class LoglikEstimate:
    """``log p_hat(y | theta, U)`` with optional per-observation log factors."""

    value: float
    per_obs: np.ndarray | None = None

    def __float__(self):
        return self.value


def _log_mean_rows(log_w, t0=0):
    """Row-wise ``log(mean(exp(log_w)))``; raises on an all ``-inf`` row."""
    out = special.logsumexp(log_w, axis=1) - math.log(log_w.shape[1])
    bad = ~np.isfinite(out)
    if bad.any():
        raise DegenerateEstimateError(t0 + int(np.argmax(bad)))
    return out


# --------------------------------------------------------------------------
# importance sampling


@dataclass(frozen=True)
class ISEstimator:
    """Per-observation importance sampling with ``N`` draws per observation."""

    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("N must be >= 1")

    def layout(self, model, T):
        return AuxLayout(T, self.N, model.aux_dim)


def is_loglik(est, model, theta, y, u):
    """Importance-sampling log-likelihood estimate.

    Parameters
    ----------
    est : ISEstimator
    model : object
        Must provide ``is_log_weights(theta, y, cells) -> (T, N)``.
    theta : array_like
    y : ndarray
        Observations, first axis is time.
    u : AuxBlock
        Block with layout ``(T, N, model.aux_dim)``.

    Returns
    -------
    LoglikEstimate
        ``value = sum_t log((1/N) sum_i w_{t,i})`` and the per-observation terms.
    """
    if not hasattr(model, "is_log_weights"):
        raise CapabilityError(f"{type(model).__name__} has no importance weights")
    lay = u.layout
    if lay.resampling or lay.N != est.N or lay.p != model.aux_dim or lay.T != len(y):
        raise ParameterError(f"auxiliary layout {lay} does not match the estimator")
    cells = u.cells
    if hasattr(model, "is_log_mean_weights"):
        per_obs = model.is_log_mean_weights(theta, y, cells)
        bad = ~np.isfinite(per_obs)
        if bad.any():
            raise DegenerateEstimateError(int(np.argmax(bad)))
        return LoglikEstimate(float(per_obs.sum()), per_obs)
    per_obs = np.empty(lay.T)
    step = max(1, _IS_CHUNK_ELEMS // (lay.N * lay.p))
    for a in range(0, lay.T, step):
        b = min(lay.T, a + step)
        per_obs[a:b] = _log_mean_rows(model.is_log_weights(theta, y[a:b], cells[a:b]), a)
    return LoglikEstimate(float(per_obs.sum()), per_obs)


def is_score(est, model, theta, y, u):
    """Gradient of the IS log-likelihood estimate with respect to ``theta``.

    Uses ``d/dtheta log mean_i w_i = sum_i softmax(log w)_i d log w_i``.
    """
    if not hasattr(model, "is_log_weight_grad"):
        raise CapabilityError(f"{type(model).__name__} has no weight gradients")
    cells = u.cells
    lay = u.layout
    if hasattr(model, "is_score"):
        return model.is_score(theta, y, cells)
    grad = np.zeros(model.dim)
    step = max(1, _IS_CHUNK_ELEMS // (lay.N * lay.p))
    for a in range(0, lay.T, step):
        b = min(lay.T, a + step)
        lw = model.is_log_weights(theta, y[a:b], cells[a:b])
        _log_mean_rows(lw, a)
        sm = special.softmax(lw, axis=1)
        grad += np.einsum("tn,tnd->d", sm, model.is_log_weight_grad(theta, y[a:b], cells[a:b]))
    return grad


# --------------------------------------------------------------------------
# sorted systematic resampling


def _lex_order(x):
    # stable lexicographic order on rows, first column most significant
    x = np.asarray(x)
    if x.ndim == 1 or x.shape[1] == 1:
        return np.argsort(x.reshape(len(x)), kind="stable")
    return np.lexsort(x.T[::-1])


def sorted_systematic_resample(log_w, particles, u_r, key_fn=None):
    """Sort particles, then invert their cumulative weights at ``(i + Phi(u_r)) / N``.

    Parameters
    ----------
    log_w : ndarray, shape (N,)
        Log weights (unnormalized).
    particles : ndarray, shape (N,) or (N, k)
    u_r : float
        Standard-normal seed variate; the common uniform is ``Phi(u_r)``.
    key_fn : callable, optional
        Maps particles to sort keys. Defaults to lexicographic order on the raw
        values. Ties keep the input order.

    Returns
    -------
    sigma : ndarray of int
        Sorting permutation; ``particles[sigma]`` is sorted.
    ancestors : ndarray of int
        ``A_i`` as positions in the sorted order. Use ``sigma[ancestors]`` to
        index the original particles.
    """
    log_w = np.asarray(log_w, dtype=float)
    N = log_w.shape[0]
    if key_fn is None:
        sigma = _lex_order(particles)
    else:
        sigma = np.argsort(key_fn(particles), kind="stable")
    lw = log_w[sigma]
    top = np.max(lw)
    if not np.isfinite(top):
        raise DegenerateEstimateError(0, "all resampling weights are zero")
    cum = np.cumsum(np.exp(lw - top))
    points = (np.arange(N) + special.ndtr(u_r)) / N * cum[-1]
    ancestors = np.minimum(np.searchsorted(cum, points, side="left"), N - 1)
    return sigma, ancestors


# --------------------------------------------------------------------------
# particle filter


@dataclass(frozen=True)
class PFEstimator:
    """Hilbert-sorted particle filter.

    Parameters
    ----------
    N : int
        Number of particles.
    loc, scale : float or array_like
        Per-axis parameters of the logistic map into the unit cube used before
        the Hilbert projection. Fixed for a run (see :func:`pilot_logistic_params`).
    hilbert_order : int
        Bits per axis of the Hilbert grid.
    """

    N: int
    loc: object = 0.0
    scale: object = 1.0
    hilbert_order: int = 16

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if np.any(np.asarray(self.scale, dtype=float) <= 0):
            raise ParameterError("logistic scale must be positive")

    def layout(self, model, T):
        return AuxLayout(T, self.N, model.aux_dim, resampling=True)

    def axis_params(self, k):
        loc = np.broadcast_to(np.asarray(self.loc, dtype=float), (k,)).copy()
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), (k,)).copy()
        return loc, scale


def pilot_logistic_params(model, theta, T, n=2000, rng=None, seed=0):
    """Median and three times the interquartile range of simulated states, per axis."""
    if rng is None:
        rng = np.random.default_rng(seed)
    x = model.sample_states(theta, T, n, rng).reshape(-1, model.state_dim)
    q25, q50, q75 = np.percentile(x, [25, 50, 75], axis=0)
    scale = 3.0 * (q75 - q25)
    scale[~(scale > 0)] = 1.0
    return q50, scale


def _pf_python(est, model, theta, y, u):
    lay = u.layout
    N = lay.N
    cells = u.cells
    ures = u.resampling
    loc, scale = est.axis_params(model.state_dim)
    order = est.hilbert_order

    def key(x):
        return hilbert_key(x, loc, scale, order)

    per_obs = np.empty(lay.T)
    x, log_w = model.pf_step(theta, y[0], None, cells[0])
    for t in range(lay.T):
        if t > 0:
            sigma, anc = sorted_systematic_resample(
                log_w, x, ures[t - 1], None if t == 1 else key)
            x, log_w = model.pf_step(theta, y[t], x[sigma[anc]], cells[t])
        per_obs[t] = _log_mean_rows(log_w[None, :], t)[0]
    return per_obs


@numba.njit(cache=True)
def _log_mean(log_w):
    n = log_w.shape[0]
    top = -np.inf
    for i in range(n):
        if log_w[i] > top:
            top = log_w[i]
    if top == -np.inf or np.isnan(top):
        return -np.inf
    s = 0.0
    for i in range(n):
        s += math.exp(log_w[i] - top)
    return top + math.log(s) - math.log(n)


@numba.njit(cache=True)
def _sort_order(x, t, loc, scale, order):
    N, k = x.shape
    if t == 1:
        # lexicographic: stable passes from least to most significant axis
        sigma = np.arange(N)
        for j in range(k - 1, -1, -1):
            col = np.empty(N)
            for i in range(N):
                col[i] = x[sigma[i], j]
            sigma = sigma[np.argsort(col, kind="mergesort")]
        return sigma
    n = 1 << order
    coords = np.empty((N, k), dtype=np.uint64)
    for i in range(N):
        for j in range(k):
            v = 1.0 / (1.0 + math.exp(-(x[i, j] - loc[j]) / scale[j]))
            c = math.floor(v * n)
            if c < 0.0:
                c = 0.0
            elif c > n - 1:
                c = n - 1.0
            coords[i, j] = np.uint64(c)
    keys = _hilbert_index_rows(coords, order)
    return np.argsort(keys, kind="mergesort")


@numba.njit(cache=True)
def _systematic_ancestors(log_w_sorted, u_uniform):
    N = log_w_sorted.shape[0]
    top = np.max(log_w_sorted)
    cum = np.empty(N)
    s = 0.0
    for i in range(N):
        s += math.exp(log_w_sorted[i] - top)
        cum[i] = s
    anc = np.empty(N, dtype=np.int64)
    j = 0
    for i in range(N):
        target = (i + u_uniform) / N * s
        while j < N - 1 and cum[j] < target:
            j += 1
        anc[i] = j
    return anc


@numba.njit(cache=True)
def _lg_weights(x, y_t):
    N, k = x.shape
    lw = np.empty(N)
    c = k * math.log(2.0 * math.pi)
    for i in range(N):
        q = 0.0
        for j in range(k):
            r = y_t[j] - x[i, j]
            q += r * r
        lw[i] = -0.5 * (c + q)
    return lw


@numba.njit(cache=True, error_model="numpy")
def _heston_weights(x0, eta, y_t, par, eps):
    x_end, s2, g = _heston_paths(x0, eta, par[0], par[1], par[2], eps)
    chi = par[3]
    N = x0.shape[0]
    lw = np.empty(N)
    x = np.empty((N, 1))
    for i in range(N):
        var = (1.0 - chi * chi) * s2[i]
        r = y_t[0] - chi * g[i]
        val = -0.5 * (math.log(2.0 * math.pi) + math.log(var) + r * r / var)
        if not (math.isfinite(val) and math.isfinite(x_end[i])):
            val = -np.inf
        lw[i] = val
        x[i, 0] = x_end[i]
    return x, lw


@numba.njit(cache=True, error_model="numpy")
def _pf_numba(kind, par, y, cells, ures, x_init, loc, scale, order):
    """Returns (per-observation log factors, failing step or -1)."""
    T, N, p = cells.shape
    k = x_init.shape[1]
    per_obs = np.empty(T)
    eps = par[par.shape[0] - 1]
    if kind == 0:
        x = x_init.copy()
        lw = _lg_weights(x, y[0])
    else:
        x, lw = _heston_weights(x_init[:, 0].copy(), cells[0, :, 1:].copy(), y[0], par, eps)
    per_obs[0] = _log_mean(lw)
    if per_obs[0] == -np.inf:
        return per_obs, 0
    A = par[: k * k].reshape((k, k)) if kind == 0 else np.empty((0, 0))
    for t in range(1, T):
        sigma = _sort_order(x, t, loc, scale, order)
        lw_s = lw[sigma]
        u_uni = 0.5 * math.erfc(-ures[t - 1] / math.sqrt(2.0))
        anc = _systematic_ancestors(lw_s, u_uni)
        src = sigma[anc]
        if kind == 0:
            xn = np.empty((N, k))
            for i in range(N):
                for a in range(k):
                    acc = 0.0
                    for b in range(k):
                        acc += A[a, b] * x[src[i], b]
                    xn[i, a] = acc + cells[t, i, a]
            x = xn
            lw = _lg_weights(x, y[t])
        else:
            x0 = np.empty(N)
            for i in range(N):
                x0[i] = x[src[i], 0]
            x, lw = _heston_weights(x0, cells[t, :, 1:].copy(), y[t], par, eps)
        per_obs[t] = _log_mean(lw)
        if per_obs[t] == -np.inf:
            return per_obs, t
    return per_obs, -1


def pf_loglik(est, model, theta, y, u, backend="auto"):
    """Hilbert-sorted particle-filter log-likelihood estimate.

    Parameters
    ----------
    est : PFEstimator
    model : object
        State-space model with ``pf_step`` (and optionally ``pf_kernel`` for the
        compiled path).
    theta : array_like
    y : ndarray, shape (T,) or (T, k)
    u : AuxBlock
        Particle-filter layout ``(T, N, model.aux_dim)`` plus ``T - 1``
        resampling variates.
    backend : {"auto", "numba", "python"}
        ``auto`` uses the compiled kernel when the model provides one.

    Returns
    -------
    LoglikEstimate

    Raises
    ------
    DegenerateEstimateError
        If every weight is zero at some step.
    """
    if not hasattr(model, "pf_step"):
        raise CapabilityError(f"{type(model).__name__} is not a state-space model")
    lay = u.layout
    if not lay.resampling or lay.N != est.N or lay.p != model.aux_dim or lay.T != len(y):
        raise ParameterError(f"auxiliary layout {lay} does not match the estimator")
    y2 = np.asarray(y, dtype=float).reshape(lay.T, -1)
    use_numba = backend == "numba" or (backend == "auto" and hasattr(model, "pf_kernel"))
    if use_numba:
        kind, par, x_init = model.pf_kernel(theta, u.cells[0])
        loc, scale = est.axis_params(model.state_dim)
        per_obs, bad = _pf_numba(kind, par, y2, u.cells, np.ascontiguousarray(u.resampling),
                                 x_init, loc, scale, est.hilbert_order)
        if bad >= 0:
            raise DegenerateEstimateError(bad)
    else:
        per_obs = _pf_python(est, model, theta, y2, u)
    return LoglikEstimate(float(per_obs.sum()), per_obs)


# --------------------------------------------------------------------------


class BoundEstimator:
    """An estimator tied to one model and data set.

    ``loglik(theta, u)`` returns a :class:`LoglikEstimate`; ``layout`` is the
    auxiliary layout expected for ``u``.
    """

    def __init__(self, est, model, y):
        self.est = est
        self.model = model
        self.y = np.asarray(y, dtype=float)
        self.layout = est.layout(model, len(self.y))
        self._fn = is_loglik if isinstance(est, ISEstimator) else pf_loglik

    @property
    def N(self):
        return self.est.N

    def loglik(self, theta, u):
        return self._fn(self.est, self.model, theta, self.y, u)

    def score(self, theta, u):
        if not isinstance(self.est, ISEstimator):
            raise CapabilityError("simulated score is only available for importance sampling")
        return is_score(self.est, self.model, theta, self.y, u)


def bind(est, model, y):
    """Return a :class:`BoundEstimator` for ``(est, model, y)``."""
    return BoundEstimator(est, model, y)

