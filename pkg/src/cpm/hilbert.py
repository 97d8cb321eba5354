"""Hilbert space-filling curve keys for points in R^k.

Points are first squashed coordinatewise into (0, 1) with a fixed logistic map,
discretized on a ``2**order`` grid per axis, and mapped to their position along
the Hilbert curve (Skilling's transpose algorithm). Keys are uint64, so
``order * k`` may not exceed 64.
"""
import numba
import numpy as np

__all__ = ["logistic_project", "grid_coords", "hilbert_index", "hilbert_key", "hilbert_sort"]


def logistic_project(x, loc, scale):
    """Coordinatewise ``1 / (1 + exp(-(x - loc) / scale))``."""
    z = (np.asarray(x, dtype=float) - loc) / scale
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def grid_coords(v, order):
    """Integer cell coordinates of points ``v`` in [0, 1]^k on a ``2**order`` grid."""
    n = 1 << order
    c = np.floor(np.asarray(v) * n)
    return np.clip(c, 0, n - 1).astype(np.uint64)


@numba.njit(cache=True)
def _hilbert_index_rows(coords, order):
    n_pts, k = coords.shape
    out = np.empty(n_pts, dtype=np.uint64)
    X = np.empty(k, dtype=np.uint64)
    one = np.uint64(1)
    for r in range(n_pts):
        for i in range(k):
            X[i] = coords[r, i]
        M = one << np.uint64(order - 1)
        # inverse undo excess work
        Q = M
        while Q > one:
            P = Q - one
            for i in range(k):
                if X[i] & Q:
                    X[0] ^= P
                else:
                    t = (X[0] ^ X[i]) & P
                    X[0] ^= t
                    X[i] ^= t
            Q >>= one
        # Gray encode
        for i in range(1, k):
            X[i] ^= X[i - 1]
        t = np.uint64(0)
        Q = M
        while Q > one:
            if X[k - 1] & Q:
                t ^= Q - one
            Q >>= one
        for i in range(k):
            X[i] ^= t
        # interleave: most significant bit of X[0] leads
        h = np.uint64(0)
        for b in range(order - 1, -1, -1):
            for i in range(k):
                h = (h << one) | ((X[i] >> np.uint64(b)) & one)
        out[r] = h
    return out


def hilbert_index(coords, order):
    """Hilbert-curve position of integer grid points ``coords`` (shape (n, k))."""
    coords = np.ascontiguousarray(np.atleast_2d(coords), dtype=np.uint64)
    k = coords.shape[1]
    if not 1 <= order <= 31:
        raise ValueError("order must lie in [1, 31]")
    if order * k > 64:
        raise ValueError(f"order * k = {order * k} exceeds the 64-bit key width")
    return _hilbert_index_rows(coords, order)


def hilbert_key(x, loc=0.0, scale=1.0, order=16):
    """Discretized Hilbert key of each row of ``x`` after the logistic projection."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return hilbert_index(grid_coords(logistic_project(x, loc, scale), order), order)


def hilbert_sort(x, loc=0.0, scale=1.0, order=16):
    """Stable argsort of the rows of ``x`` by Hilbert key (ties keep input order)."""
    return np.argsort(hilbert_key(x, loc, scale, order), kind="stable")
