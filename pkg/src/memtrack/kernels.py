"""Point-cloud inner loops: farthest-point sampling, kNN graphs, nearest matches.

Each kernel has a numba-compiled implementation and a pure-numpy one. The
numba path is used when numba imports cleanly and ``MEMTRACK_DISABLE_NUMBA``
is unset (or ``0``). Both paths compute squared distances in the same order
(``dx*dx + dy*dy + dz*dz``) and break ties toward the lower index, so their
outputs are identical.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MEMTRACK_DISABLE_NUMBA", "0") in ("", "0")


def _sqdist_rows(pts: np.ndarray, c: np.ndarray) -> np.ndarray:
    dx = pts[:, 0] - c[0]
    dy = pts[:, 1] - c[1]
    dz = pts[:, 2] - c[2]
    return dx * dx + dy * dy + dz * dz


# numpy implementations -----------------------------------------------------

def fps_numpy(xyz: np.ndarray, m: int) -> np.ndarray:
    n = xyz.shape[0]
    out = np.empty(m, dtype=np.int64)
    norms = xyz[:, 0] * xyz[:, 0] + xyz[:, 1] * xyz[:, 1] + xyz[:, 2] * xyz[:, 2]
    cur = int(np.argmax(norms))
    best = np.full(n, np.inf)
    for i in range(m):
        out[i] = cur
        best = np.minimum(best, _sqdist_rows(xyz, xyz[cur]))
        cur = int(np.argmax(best))
    return out


def knn_numpy(xyz: np.ndarray, k: int) -> np.ndarray:
    d = (
        (xyz[:, None, 0] - xyz[None, :, 0]) ** 2
        + (xyz[:, None, 1] - xyz[None, :, 1]) ** 2
        + (xyz[:, None, 2] - xyz[None, :, 2]) ** 2
    )
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def nearest_numpy(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = (
        (src[:, None, 0] - dst[None, :, 0]) ** 2
        + (src[:, None, 1] - dst[None, :, 1]) ** 2
        + (src[:, None, 2] - dst[None, :, 2]) ** 2
    )
    idx = np.argmin(d, axis=1)
    return idx.astype(np.int64), np.sqrt(d[np.arange(src.shape[0]), idx])


# numba implementations -----------------------------------------------------

def _fps_loop(xyz, m):
    n = xyz.shape[0]
    out = np.empty(m, dtype=np.int64)
    best = np.empty(n)
    cur = 0
    top = -1.0
    for j in range(n):
        v = xyz[j, 0] * xyz[j, 0] + xyz[j, 1] * xyz[j, 1] + xyz[j, 2] * xyz[j, 2]
        if v > top:
            top = v
            cur = j
        best[j] = np.inf
    for i in range(m):
        out[i] = cur
        cx, cy, cz = xyz[cur, 0], xyz[cur, 1], xyz[cur, 2]
        nxt = 0
        top = -1.0
        for j in range(n):
            dx = xyz[j, 0] - cx
            dy = xyz[j, 1] - cy
            dz = xyz[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < best[j]:
                best[j] = d
            if best[j] > top:
                top = best[j]
                nxt = j
        cur = nxt
    return out


def _knn_loop(xyz, k):
    n = xyz.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    bd = np.empty(k)
    bi = np.empty(k, dtype=np.int64)
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            dx = xyz[i, 0] - xyz[j, 0]
            dy = xyz[i, 1] - xyz[j, 1]
            dz = xyz[i, 2] - xyz[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= bd[k - 1]:
                continue
            # insertion keeps (distance, index) order; equal distances stay behind
            pos = filled if filled < k else k - 1
            while pos > 0 and bd[pos - 1] > d:
                if pos < k:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = d
            bi[pos] = j
            if filled < k:
                filled += 1
        for c in range(k):
            out[i, c] = bi[c]
    return out


def _nearest_loop(src, dst):
    a = src.shape[0]
    b = dst.shape[0]
    idx = np.empty(a, dtype=np.int64)
    dist = np.empty(a)
    for i in range(a):
        best = np.inf
        arg = 0
        for j in range(b):
            dx = src[i, 0] - dst[j, 0]
            dy = src[i, 1] - dst[j, 1]
            dz = src[i, 2] - dst[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                arg = j
        idx[i] = arg
        dist[i] = np.sqrt(best)
    return idx, dist


if numba is not None:
    fps_numba = numba.njit(cache=True)(_fps_loop)
    knn_numba = numba.njit(cache=True)(_knn_loop)
    nearest_numba = numba.njit(cache=True)(_nearest_loop)
else:  # pragma: no cover
    fps_numba, knn_numba, nearest_numba = _fps_loop, _knn_loop, _nearest_loop


# dispatch ------------------------------------------------------------------

def farthest_point_sample(xyz: np.ndarray, m: int) -> np.ndarray:
    """Indices of ``m`` points chosen by farthest-point sampling.

    Starts from the point of largest norm; ties go to the lowest index.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if m > xyz.shape[0] or m < 0:
        raise ValueError(f"cannot sample {m} of {xyz.shape[0]} points")
    if m == 0:
        return np.empty(0, dtype=np.int64)
    return fps_numba(xyz, m) if USE_NUMBA else fps_numpy(xyz, m)


def knn_graph(xyz: np.ndarray, k: int) -> np.ndarray:
    """n x k neighbour indices (self excluded), nearest first."""
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if xyz.shape[0] < k + 1:
        raise ValueError(f"knn needs at least k+1={k + 1} points, got {xyz.shape[0]}")
    return knn_numba(xyz, k) if USE_NUMBA else knn_numpy(xyz, k)


def nearest_neighbors(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``src`` the index of and distance to its nearest ``dst`` row."""
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 3)
    if dst.shape[0] == 0:
        raise ValueError("nearest_neighbors: empty target set")
    if src.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return nearest_numba(src, dst) if USE_NUMBA else nearest_numpy(src, dst)
