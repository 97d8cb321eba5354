"""Chain diagnostics: autocorrelation times, log-likelihood error samples, score error.

The log-likelihood error of an estimate is ``Z = log p_hat(y | theta, U) -
log p(y | theta)``. For a current block ``U`` and its autoregressive proposal
``U'``, ``W`` is the error at ``U'`` and ``R = W - Z`` is the quantity that
enters the acceptance ratio. ``kappa^2 = Var(R)`` at stationarity and
``sigma^2 = Var(Z)`` under fresh draws are the two scales of interest.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .auxvars import _as_rho, cn_step, sample_fresh, stream
from .errors import CapabilityError, DegenerateEstimateError, ParameterError, UndefinedIACTError
from .theory import rho_u

__all__ = [
    "autocorrelation",
    "iact",
    "ess",
    "batch_means_stderr",
    "moment_gap",
    "MomentCheck",
    "clt_moment_checks",
    "ErrorSamples",
    "loglik_error_samples",
    "stationary_burn_in",
    "DiagnosticsSummary",
    "summarize",
    "ScoreError",
    "score_error",
    "slow_fast_decompose",
    "score_if_envelope",
    "score_if_vs_delta",
    "acceptance_lower_bound",
    "write_report",
]


# --------------------------------------------------------------------------
# autocorrelation


def autocorrelation(x, max_lag=None):
    """Sample autocorrelation ``phi_0 .. phi_max_lag`` computed with an FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    d = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0:
        raise UndefinedIACTError("series has zero variance")
    acf = acov / acov[0]
    return acf if max_lag is None else acf[: max_lag + 1]


def iact(series, cutoff="geyer"):
    """Integrated autocorrelation time ``1 + 2 sum_{n=1}^{L} phi_n``.

    Parameters
    ----------
    series : array_like
        At least 100 values.
    cutoff : {"geyer", "threshold"}
        ``geyer`` sums autocorrelation pairs ``phi_{2m} + phi_{2m+1}`` while they
        stay positive (initial positive sequence). ``threshold`` stops at the
        first lag with ``phi_n < 2 / sqrt(len)``.

    Returns
    -------
    float
    """
    x = np.asarray(series, dtype=float).ravel()
    if len(x) < 100:
        raise ParameterError("iact needs at least 100 values")
    if not np.all(np.isfinite(x)):
        raise ParameterError("series contains non-finite values")
    if np.ptp(x) == 0:
        raise UndefinedIACTError("series is constant")
    acf = autocorrelation(x)
    n = len(acf)
    if cutoff == "geyer":
        m = (n - 1) // 2
        pairs = acf[0: 2 * m: 2] + acf[1: 2 * m + 1: 2]
        neg = np.nonzero(pairs <= 0)[0]
        stop = neg[0] if len(neg) else m
        return float(-1.0 + 2.0 * pairs[:stop].sum())
    if cutoff == "threshold":
        below = np.nonzero(acf[1:] < 2.0 / math.sqrt(n))[0]
        L = below[0] if len(below) else n - 1
        return float(1.0 + 2.0 * acf[1: L + 1].sum())
    raise ParameterError(f"unknown cutoff rule {cutoff!r}")


def ess(series, cutoff="geyer"):
    """Effective sample size ``n / IACT``."""
    return len(series) / iact(series, cutoff)


def batch_means_stderr(x, n_batches=None):
    """Standard error of the mean from non-overlapping batch means (``sqrt(n)`` batches)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    b = n_batches or max(2, int(math.sqrt(n)))
    size = n // b
    if size < 1 or b < 2:
        raise ParameterError("too few samples for batch means")
    means = x[: size * b].reshape(b, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(b))


def moment_gap(x, sign=1.0, n_batches=None):
    """``mean(x) + sign * var(x) / 2`` and its batch-means standard error.

    The standard error uses the linearization ``x + sign * (x - mean)^2 / 2``.
    """
    x = np.asarray(x, dtype=float)
    m = x.mean()
    v = x.var()
    infl = x + sign * 0.5 * (x - m) ** 2
    return float(m + sign * 0.5 * v), batch_means_stderr(infl, n_batches)


@dataclass(frozen=True)
class MomentCheck:
    stat: str
    value: float
    stderr: float

    @property
    def z(self):
        return abs(self.value) / self.stderr if self.stderr > 0 else math.inf

    @property
    def flag(self):
        """True when the identity is rejected at three standard errors."""
        return self.z > 3.0


def clt_moment_checks(Z=None, R=None, Z_stationary=None):
    """Check the Gaussian moment identities of the log-likelihood errors.

    * ``R`` at stationarity: ``mean + var/2 = 0``;
    * ``Z`` under fresh draws: ``mean + var/2 = 0``;
    * ``Z`` at stationarity: ``mean - var/2 = 0``.

    Returns
    -------
    list of MomentCheck
    """
    out = []
    for name, x, sign in (("R", R, 1.0), ("Z_m", Z, 1.0), ("Z_stationary", Z_stationary, -1.0)):
        if x is None:
            continue
        if len(x) < 1000:
            raise ParameterError(f"{name}: at least 1000 samples required")
        v, se = moment_gap(x, sign)
        out.append(MomentCheck(f"{name}_mean{'+' if sign > 0 else '-'}var/2", v, se))
    return out


# --------------------------------------------------------------------------
# log-likelihood error samples


@dataclass
class ErrorSamples:
    """Draws of ``Z`` (current), ``W`` (proposed) and ``R = W - Z``."""

    Z: np.ndarray
    W: np.ndarray
    R: np.ndarray
    accepted: np.ndarray | None = None

    @property
    def kappa_sq(self):
        return float(np.var(self.R, ddof=1))

    @property
    def sigma_sq(self):
        return float(np.var(self.Z, ddof=1))

    @property
    def acceptance_rate(self):
        return math.nan if self.accepted is None else float(np.mean(self.accepted))


def stationary_burn_in(rho):
    """Default burn-in of the auxiliary-only chain: ``max(500, 20 / (1 - rho))``."""
    rho = _as_rho(rho)
    return 500 if rho <= 0 else max(500, math.ceil(20.0 / (1.0 - rho)))


def _safe_loglik(target, theta, u):
    try:
        return target.loglik_hat(theta, u)
    except DegenerateEstimateError:
        return -math.inf


def loglik_error_samples(target, theta, rho, n, mode="stationary", seed=0, chain_id=0,
                         burn_in=None, callback=None, require_exact=True):
    """Sample ``Z``, ``W`` and ``R`` at a fixed parameter.

    Parameters
    ----------
    target : samplers.Target
        Must provide the exact log-likelihood.
    theta : array_like
    rho : float or CorrelationParam
    n : int
        Number of recorded draws.
    mode : {"stationary", "proposal_m"}
        ``proposal_m`` draws ``U`` fresh from ``N(0, I)`` and ``U'`` from the
        autoregressive kernel. ``stationary`` runs the auxiliary-only chain at
        ``theta`` (Metropolis-Hastings on the estimated likelihood) and records
        ``Z`` at the current block and ``W`` at each proposal.
    burn_in : int, optional
        Stationary mode only; defaults to :func:`stationary_burn_in`.
    callback : callable, optional
        ``callback(i, u)`` with the current block after each recorded iteration.
    require_exact : bool
        With False and no exact likelihood available, ``Z`` and ``W`` are the raw
        log estimates (shifted by the unknown ``log p``); ``R`` is unaffected.

    Returns
    -------
    ErrorSamples
    """
    try:
        ll = target.loglik_exact(theta)
    except (AttributeError, NotImplementedError, CapabilityError) as exc:
        if require_exact:
            raise CapabilityError("log-likelihood error needs an exact likelihood") from exc
        ll = 0.0
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lay = target.layout
    Z = np.empty(n)
    W = np.empty(n)
    if mode == "proposal_m":
        for i in range(n):
            rng = stream(seed, chain_id, i)
            u = sample_fresh(lay, rng)
            u2 = cn_step(u, rho, rng)
            Z[i] = _safe_loglik(target, theta, u) - ll
            W[i] = _safe_loglik(target, theta, u2) - ll
            if callback is not None:
                callback(i, u)
        return ErrorSamples(Z, W, W - Z)
    if mode != "stationary":
        raise ParameterError(f"unknown mode {mode!r}")
    if burn_in is None:
        burn_in = stationary_burn_in(rho)
    acc = np.zeros(n, dtype=bool)
    u = sample_fresh(lay, stream(seed, chain_id, 2**40))
    z = _safe_loglik(target, theta, u) - ll
    for it in range(burn_in + n):
        rng = stream(seed, chain_id, it)
        u2 = cn_step(u, rho, rng)
        w = _safe_loglik(target, theta, u2) - ll
        r = w - z
        ok = r >= 0 or (w > -math.inf and math.log(rng.random()) < r)
        i = it - burn_in
        if i >= 0:
            Z[i] = z
            W[i] = w
            acc[i] = ok
        if ok:
            u, z = u2, w
        if i >= 0 and callback is not None:
            callback(i, u)
    return ErrorSamples(Z, W, W - Z, acc)


# --------------------------------------------------------------------------
# chain summaries


@dataclass
class DiagnosticsSummary:
    if_estimate: np.ndarray
    kappa_sq: float
    sigma_sq: float
    acc_rate: float
    ess: np.ndarray

    def rows(self):
        out = [("acc_rate", self.acc_rate, math.nan, "")]
        for j, (f, e) in enumerate(zip(self.if_estimate, self.ess)):
            out.append((f"if_theta{j}", float(f), math.nan, ""))
            out.append((f"ess_theta{j}", float(e), math.nan, ""))
        out.append(("kappa_sq", self.kappa_sq, math.nan, ""))
        out.append(("sigma_sq", self.sigma_sq, math.nan, ""))
        return out


def summarize(trace, burn_in=0, kappa_sq=math.nan, sigma_sq=math.nan, cutoff="geyer"):
    """IF and ESS per parameter coordinate plus acceptance rate of a chain trace."""
    tr = trace.after(burn_in) if burn_in else trace
    ifs = []
    for j in range(tr.theta.shape[1]):
        try:
            ifs.append(iact(tr.theta[:, j], cutoff))
        except UndefinedIACTError:
            ifs.append(math.inf)
    ifs = np.array(ifs)
    return DiagnosticsSummary(ifs, kappa_sq, sigma_sq, tr.acceptance_rate, len(tr) / ifs)


def acceptance_lower_bound(kappa, exact_acceptance):
    """``rho_u(kappa) * exact-kernel acceptance``, an asymptotic lower bound."""
    return rho_u(kappa) * exact_acceptance


# --------------------------------------------------------------------------
# score error


@dataclass(frozen=True)
class ScoreError:
    """``Psi = grad log p_hat(y | theta, U) - grad log p(y | theta)``."""

    psi: np.ndarray


def score_error(target, theta_hat, u):
    """Simulated minus exact score at ``theta_hat``."""
    model = target.model
    if not hasattr(model, "exact_score"):
        raise CapabilityError(f"{type(model).__name__} has no analytic score")
    sim = target.estimator.score(theta_hat, u)
    return ScoreError(np.atleast_1d(sim - model.exact_score(theta_hat, target.y)))


def slow_fast_decompose(theta_trace, psi_trace, theta_hat, sigma_bar, T):
    """Split a chain into ``f = theta_hat + sigma_bar Psi / T`` and ``g = theta - f``.

    Returns
    -------
    (ndarray, ndarray)
        Slow and fast components, shaped like ``theta_trace``.
    """
    th = np.asarray(theta_trace, dtype=float)
    ps = np.asarray(psi_trace, dtype=float)
    if th.shape[0] != ps.shape[0]:
        raise ParameterError("theta and psi traces have different lengths")
    sb = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    if np.any(np.diag(sb) <= 0):
        raise ParameterError("sigma_bar must be positive")
    squeeze = th.ndim == 1
    th2 = th.reshape(len(th), -1)
    ps2 = ps.reshape(len(ps), -1)
    f = np.atleast_1d(theta_hat)[None, :] + ps2 @ sb.T / T
    g = th2 - f
    if squeeze:
        return f[:, 0], g[:, 0]
    return f, g


def score_if_envelope(delta, rho_bar):
    """Lower and upper envelopes ``1 / (delta rho_bar)`` and ``2 / (delta rho_bar)``."""
    lo = 1.0 / (delta * rho_bar)
    return lo, 2.0 * lo


def score_if_vs_delta(target_factory, model, theta_hat, T, grid, n_iters, seed=0,
                      kappa_sq_per_psi=None, pilot_samples=4000):
    """Inefficiency of the score error along the auxiliary-only chain.

    Parameters
    ----------
    target_factory : callable
        ``target_factory(N) -> Target`` for an importance-sampling estimator with
        ``N`` draws per observation.
    model : GaussianREModel
    theta_hat : array_like
    T : int
    grid : iterable of (kappa_sq, delta)
        ``N = round(delta * T / psi)`` with ``psi = kappa_sq / kappa_sq_per_psi``.
    n_iters : int
    kappa_sq_per_psi : float, optional
        Ratio ``kappa^2 / psi``. When omitted it is measured once on a pilot
        auxiliary chain with ``psi = 0.5`` and ``delta = 0.05``.

    Returns
    -------
    list of dict
        Keys ``kappa_sq, delta, N, rho, if_psi, acc, lower, upper, kappa_sq_hat``.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    if kappa_sq_per_psi is None:
        psi0, d0 = 0.5, 0.05
        pilot = target_factory(max(1, int(round(d0 * T / psi0))))
        es = loglik_error_samples(pilot, theta_hat, math.exp(-d0), pilot_samples, seed=seed,
                                  chain_id=2**20)
        kappa_sq_per_psi = es.kappa_sq / psi0
    rows = []
    for j, (k2, delta) in enumerate(grid):
        psi = k2 / kappa_sq_per_psi
        N = max(1, int(round(delta * T / psi)))
        rho = math.exp(-delta)
        target = target_factory(N)
        psis = np.empty(n_iters)
        exact = model.exact_score(theta_hat, target.y)[0]
        last = [None, 0.0]

        def record(i, u, target=target, psis=psis, exact=exact, last=last):
            # the score only changes when the block does
            if u is not last[0]:
                last[0] = u
                last[1] = target.estimator.score(theta_hat, u)[0] - exact
            psis[i] = last[1]

        es = loglik_error_samples(target, theta_hat, rho, n_iters, seed=seed, chain_id=j,
                                  callback=record)
        acc = es.acceptance_rate
        lo, hi = score_if_envelope(delta, acc)
        rows.append(dict(kappa_sq=k2, delta=delta, N=N, rho=rho, if_psi=iact(psis), acc=acc,
                         lower=lo, upper=hi, kappa_sq_hat=es.kappa_sq))
    return rows


# --------------------------------------------------------------------------
# reports


def write_report(path, rows, header_comment=None):
    """Write ``stat,value,stderr,flag`` rows as RFC-4180 CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\r\n")
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["stat", "value", "stderr", "flag"])
        for stat, value, se, flag in rows:
            w.writerow([stat, _fmt(value), _fmt(se), flag])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return x
