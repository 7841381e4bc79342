"""Hot loops with a numba-compiled path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``CLUSTERMASK_NUMBA=0`` to
force the numpy path (numba is also skipped when it cannot be imported).
Both paths are always importable as ``<name>_numpy`` / ``<name>_numba`` so
that tests and the benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("CLUSTERMASK_NUMBA", "1") not in ("0", "false", "no")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


# --------------------------------------------------------------------------
# Linear assignment (shortest augmenting path with dual potentials)
# --------------------------------------------------------------------------


def _assign_rows_loop(cost):
    # cost: n x m with n <= m. Returns col_of_row (length n).
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _check_wide(cost) -> np.ndarray:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValueError(f"assign_rows needs an n x m cost with n <= m, got shape {cost.shape}")
    return cost


def assign_rows_numpy(cost: np.ndarray) -> np.ndarray:
    """Same algorithm as the loop kernel with the column scan vectorized."""
    cost = _check_wide(cost)
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    rows = p[1:]
    hit = rows != 0
    col_of_row[rows[hit] - 1] = np.nonzero(hit)[0]
    return col_of_row


# --------------------------------------------------------------------------
# Segment pair counting (confusion matrix of two id rasters)
# --------------------------------------------------------------------------


def _pair_counts_loop(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    for i in range(a.shape[0]):
        out[a[i], b[i]] += 1
    return out


def pair_counts_numpy(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    flat = a.astype(np.int64) * nb + b.astype(np.int64)
    return np.bincount(flat, minlength=na * nb).reshape(na, nb)


# --------------------------------------------------------------------------
# Counter-based splitmix64 uniforms
# --------------------------------------------------------------------------


def _splitmix_uniform_loop(seed, n):
    out = np.empty(n, dtype=np.float64)
    s = np.uint64(seed)
    for i in range(n):
        z = s + np.uint64(i + 1) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
        out[i] = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out


def splitmix_uniform_numpy(seed: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1): element i is splitmix64 applied to state seed + (i+1)*golden."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# Backend selection
# --------------------------------------------------------------------------

if _HAVE_NUMBA:
    _assign_rows_jit = numba.njit(cache=True)(_assign_rows_loop)
    _pair_counts_jit = numba.njit(cache=True)(_pair_counts_loop)
    _splitmix_jit = numba.njit(cache=True)(_splitmix_uniform_loop)

    def assign_rows_numba(cost: np.ndarray) -> np.ndarray:
        return _assign_rows_jit(_check_wide(cost))

    def pair_counts_numba(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
        return _pair_counts_jit(
            np.ascontiguousarray(a, dtype=np.int64).ravel(),
            np.ascontiguousarray(b, dtype=np.int64).ravel(),
            na,
            nb,
        )

    def splitmix_uniform_numba(seed: int, n: int) -> np.ndarray:
        return _splitmix_jit(np.uint64(seed), n)

else:  # pragma: no cover
    assign_rows_numba = assign_rows_numpy
    pair_counts_numba = pair_counts_numpy
    splitmix_uniform_numba = splitmix_uniform_numpy


if USE_NUMBA:
    assign_rows = assign_rows_numba
    pair_counts = pair_counts_numba
    splitmix_uniform = splitmix_uniform_numba
else:
    assign_rows = assign_rows_numpy
    pair_counts = pair_counts_numpy
    splitmix_uniform = splitmix_uniform_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
