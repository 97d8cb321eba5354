"""Auxiliary standard-normal variates and the autoregressive kernel that correlates them.

A likelihood estimator is a deterministic function of ``(theta, U)`` where ``U``
is a block of ``M`` i.i.d. N(0, 1) variates. The block is laid out t-major, then
particle index, then coordinate; particle-filter layouts append ``T - 1`` scalar
resampling variates at the tail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = [
    "AuxLayout",
    "AuxBlock",
    "CorrelationParam",
    "stream",
    "sample_fresh",
    "cn_step",
]


def stream(seed, *key):
    """Counter-based generator for the stream identified by ``(seed, *key)``.

    Keys are small non-negative integers such as (chain, iteration, purpose).
    The same key always yields the same sequence, independent of what other
    streams have been consumed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class AuxLayout:
    """Shape of an auxiliary block: ``T`` steps, ``N`` particles, ``p`` coords each."""

    T: int
    N: int
    p: int = 1
    resampling: bool = False

    def __post_init__(self):
        if self.T < 1 or self.N < 1 or self.p < 1:
            raise ParameterError(f"layout dimensions must be positive, got {self}")

    @property
    def n_cells(self):
        return self.T * self.N * self.p

    @property
    def size(self):
        """Total number of variates ``M``."""
        return self.n_cells + (self.T - 1 if self.resampling else 0)

    def index(self, t, i, coord=0):
        """Flat index of cell ``(t, i, coord)`` (all zero-based)."""
        if not (0 <= t < self.T and 0 <= i < self.N and 0 <= coord < self.p):
            raise IndexError((t, i, coord))
        return (t * self.N + i) * self.p + coord

    def resampling_index(self, t):
        """Flat index of the resampling variate used after step ``t`` (0 <= t < T-1)."""
        if not self.resampling or not 0 <= t < self.T - 1:
            raise IndexError(t)
        return self.n_cells + t


@dataclass(frozen=True, eq=False)
class AuxBlock:
    """Immutable block of auxiliary variates with its layout."""

    values: np.ndarray
    layout: AuxLayout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.layout.size,):
            raise ParameterError(
                f"expected {self.layout.size} values for {self.layout}, got shape {values.shape}"
            )
        if values.flags.writeable:
            # never freeze a caller-owned array in place
            values = values.copy() if values is self.values else values
            values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def cells(self):
        """Read-only ``(T, N, p)`` view of the per-particle variates."""
        lay = self.layout
        return self.values[: lay.n_cells].reshape(lay.T, lay.N, lay.p)

    @property
    def resampling(self):
        """Read-only view of the ``T - 1`` resampling variates (empty for IS layouts)."""
        return self.values[self.layout.n_cells:]

    def __len__(self):
        return self.layout.size


@dataclass(frozen=True)
class CorrelationParam:
    """Autoregressive correlation ``rho`` of the Crank-Nicolson kernel."""

    rho: float

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0 or math.isnan(self.rho):
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")

    @classmethod
    def from_scaling(cls, psi, N, T):
        """``rho = exp(-psi * N / T)``."""
        if psi <= 0 or N < 1 or T < 1:
            raise ParameterError("psi must be positive and N, T >= 1")
        return cls(math.exp(-psi * N / T))

    @property
    def delta(self):
        """``-log(rho)``; infinite for rho <= 0."""
        return -math.log(self.rho) if self.rho > 0 else math.inf


def _owned(values, layout):
    values.flags.writeable = False
    return AuxBlock(values, layout)


def _as_rho(rho):
    return rho.rho if isinstance(rho, CorrelationParam) else CorrelationParam(float(rho)).rho


def sample_fresh(layout, rng):
    """Draw a block ``U ~ N(0, I_M)`` for ``layout`` from generator ``rng``."""
    return _owned(rng.standard_normal(layout.size), layout)


def cn_step(u, rho, rng):
    """One move of the autoregressive kernel ``U' = rho U + sqrt(1 - rho^2) eps``.

    ``rho = 1`` returns ``u`` unchanged (no draw is consumed); ``rho = 0`` returns
    the fresh draw itself, which is exactly a pseudo-marginal refresh.
    """
    rho = _as_rho(rho)
    if rho == 1.0:
        return u
    eps = rng.standard_normal(u.layout.size)
    if rho == 0.0:
        return _owned(eps, u.layout)
    scale = math.sqrt(1.0 - rho * rho)
    out = eps
    out *= scale
    out += rho * u.values
    return _owned(out, u.layout)
