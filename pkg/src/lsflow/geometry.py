"""Exact point-cloud primitives: FPS, KNN, inverse-distance interpolation, voxel binning.

Everything here works on numpy arrays and is deterministic. Ties always resolve
to the lowest index.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

INTERP_EPS = 1e-8
DEFAULT_INTERP_K = 3


class NeighborSet(NamedTuple):
    indices: np.ndarray  # (..., k) int64
    distances: np.ndarray  # (..., k) float64, ascending


def as_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def _sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    # direct differences; the |a|^2+|b|^2-2ab expansion loses exactness near ties
    diff = queries[:, None, :] - points[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def farthest_point_sample(points, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting at ``start``.

    Each new pick maximizes the minimum distance to the already selected set;
    ties go to the lowest index and selected points are never picked twice.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_d = np.sum((pts - pts[start]) ** 2, axis=1)
    min_d[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_d))  # argmax returns the first maximum
        selected[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[selected[: i + 1]] = -1.0
    return selected


def knn_query(points, queries, k: int, chunk: int = 512) -> NeighborSet:
    """Exact k nearest neighbors of every query, distances ascending.

    Returns arrays of shape (n_queries, k).
    """
    pts = as_points(points)
    qs = as_points(queries, "queries")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    out_idx = np.empty((qs.shape[0], k), dtype=np.int64)
    out_dist = np.empty((qs.shape[0], k), dtype=np.float64)
    for lo in range(0, qs.shape[0], chunk):
        d2 = _sq_dists(qs[lo : lo + chunk], pts)
        if k < n:
            # keep every candidate tied with the k-th distance, then stable-sort
            kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
            for row in range(d2.shape[0]):
                cand = np.flatnonzero(d2[row] <= kth[row])
                order = cand[np.argsort(d2[row, cand], kind="stable")][:k]
                out_idx[lo + row] = order
                out_dist[lo + row] = np.sqrt(d2[row, order])
        else:
            order = np.argsort(d2, axis=1, kind="stable")
            out_idx[lo : lo + chunk] = order
            out_dist[lo : lo + chunk] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborSet(out_idx, out_dist)


def interpolation_weights(distances: np.ndarray, eps: float = INTERP_EPS) -> np.ndarray:
    inv = 1.0 / (np.asarray(distances, dtype=np.float64) + eps)
    return inv / inv.sum(axis=-1, keepdims=True)


def inverse_distance_interpolate(
    query, points, features, k: int = DEFAULT_INTERP_K, eps: float = INTERP_EPS
) -> np.ndarray:
    """Inverse-distance weighted average of the features of the k nearest points.

    ``query`` may be a single point (returns one row) or an (m, 3) array.
    """
    pts = as_points(points)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
        raise ValueError(f"features must have shape ({pts.shape[0]}, c), got {feats.shape}")
    single = np.asarray(query).ndim == 1
    nb = knn_query(pts, query, k)
    w = interpolation_weights(nb.distances, eps)
    out = np.einsum("qk,qkc->qc", w, feats[nb.indices])
    return out[0] if single else out


def voxel_cells(offsets: np.ndarray, radius: float, resolution: int) -> np.ndarray:
    """Flat sub-cube index for offsets relative to the cube center, -1 when outside.

    The cube is closed; points on an internal face belong to the lower cell.
    Flat index is ``(ix * a + iy) * a + iz``.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    off = np.asarray(offsets, dtype=np.float64)
    inside = np.all(np.abs(off) <= radius, axis=-1)
    u = (off + radius) * (resolution / (2.0 * radius))
    cell = np.clip(np.ceil(u).astype(np.int64) - 1, 0, resolution - 1)
    flat = (cell[..., 0] * resolution + cell[..., 1]) * resolution + cell[..., 2]
    return np.where(inside, flat, -1)


def voxel_bin(center, radius: float, resolution: int, points) -> list[list[int]]:
    """Split the cube ``[center - r, center + r]^3`` into a^3 cells and list members."""
    c = np.asarray(center, dtype=np.float64).reshape(3)
    pts = as_points(points)
    cells = voxel_cells(pts - c, radius, resolution)
    bins: list[list[int]] = [[] for _ in range(resolution**3)]
    for idx, cell in enumerate(cells):
        if cell >= 0:
            bins[cell].append(idx)
    return bins


def random_subsample(points, m: int, seed: int) -> np.ndarray:
    """``m`` distinct indices drawn without replacement, reproducible from ``seed``."""
    n = as_points(points).shape[0]
    if not 0 <= m <= n:
        raise ValueError(f"m must be in [0, {n}], got {m}")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=m, replace=False).astype(np.int64)
