"""Hot numeric kernels with numba and pure-numpy backends.

Two loops dominate full evaluation runs: the O(n*m) DTW recurrence behind
the pairwise-channel similarity features (hundreds of thousands of small
calls) and the momentum-SGD parameter update (one full pass over every
weight tensor per training step). Each has two interchangeable backends:

  * numba @njit kernel (default when numba imports cleanly)
  * pure-numpy fallback

Set GESTFUSE_NO_NUMBA=1 before import to force the numpy paths. Paired
backends apply the identical sequence of rounded operations, so their
results match bit for bit (no fastmath on the jits for the same reason).
"""
from __future__ import annotations

import os

import numpy as np

from .types import PipelineError

_NO_NUMBA = os.environ.get("GESTFUSE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _NO_NUMBA:
        raise ImportError("numba disabled via GESTFUSE_NO_NUMBA")
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False


def _dtw_numpy(cost: np.ndarray) -> float:
    """Anti-diagonal DP sweep; cells on one diagonal are independent."""
    n, m = cost.shape
    d = np.empty((n, m), dtype=np.float64)
    d[0, :] = np.cumsum(cost[0, :])
    d[1:, 0] = np.cumsum(cost[:, 0])[1:]
    for k in range(2, n + m - 1):
        lo = max(1, k - (m - 1))
        hi = min(n - 1, k - 1)
        if lo > hi:
            continue
        ii = np.arange(lo, hi + 1)
        jj = k - ii
        best = np.minimum(np.minimum(d[ii - 1, jj - 1], d[ii - 1, jj]), d[ii, jj - 1])
        d[ii, jj] = cost[ii, jj] + best
    return float(d[n - 1, m - 1])


if _HAVE_NUMBA:

    @njit(cache=True)
    def _dtw_numba(cost):  # pragma: no cover - exercised via dispatch
        n, m = cost.shape
        d = np.empty((n, m), dtype=np.float64)
        acc = 0.0
        for j in range(m):
            acc = acc + cost[0, j]
            d[0, j] = acc
        acc = d[0, 0]
        for i in range(1, n):
            acc = acc + cost[i, 0]
            d[i, 0] = acc
        for i in range(1, n):
            for j in range(1, m):
                best = d[i - 1, j - 1]
                if d[i - 1, j] < best:
                    best = d[i - 1, j]
                if d[i, j - 1] < best:
                    best = d[i, j - 1]
                d[i, j] = cost[i, j] + best
        return d[n - 1, m - 1]

    @njit(cache=True)
    def _sgd_update_numba(w, v, g, lr, momentum):  # pragma: no cover - via dispatch
        for i in range(w.size):
            vi = momentum * v[i] - lr * g[i]
            v[i] = vi
            w[i] = w[i] + vi

    BACKEND = "numba"
else:
    _dtw_numba = None
    _sgd_update_numba = None
    BACKEND = "numpy"


def dtw_cost_matrix(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Pairwise frame costs, float64, shape (len(a), len(b)).

    1-d inputs are treated as one-dimensional feature sequences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2:
        raise PipelineError("bad-sequence: DTW inputs must be 1-d or 2-d")
    if len(a) == 0 or len(b) == 0:
        raise PipelineError("empty-sequence: DTW input has no frames")
    if a.shape[1] != b.shape[1]:
        raise PipelineError(
            f"dimension-mismatch: {a.shape[1]} vs {b.shape[1]} feature dims"
        )
    diff = a[:, None, :] - b[None, :, :]
    if metric == "euclidean":
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "sqeuclidean":
        return np.einsum("ijk,ijk->ij", diff, diff)
    if metric == "cityblock":
        return np.abs(diff).sum(axis=2)
    raise PipelineError(f"unknown-metric: {metric!r}")


def dtw_from_cost(cost: np.ndarray) -> float:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if _HAVE_NUMBA:
        return float(_dtw_numba(cost))
    return _dtw_numpy(cost)


def sgd_momentum_update(w: np.ndarray, v: np.ndarray, g: np.ndarray,
                        lr: float, momentum: float) -> None:
    """In-place fused momentum step: v = momentum*v - lr*g; w += v.

    Scalars are cast to the parameter dtype first, matching numpy's weak
    scalar promotion, so both backends round identically."""
    lr_t = w.dtype.type(lr)
    mu_t = w.dtype.type(momentum)
    if (_HAVE_NUMBA and w.dtype == v.dtype == g.dtype
            and w.flags.c_contiguous and v.flags.c_contiguous and g.flags.c_contiguous):
        _sgd_update_numba(w.reshape(-1), v.reshape(-1), g.reshape(-1), lr_t, mu_t)
        return
    v *= mu_t
    v -= lr_t * g
    w += v
