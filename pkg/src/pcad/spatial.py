"""Spatial queries over point clouds: k-d tree wrapper, octree resampling,
and balanced spatial clustering.

All query results are deterministic: neighbors are ordered by distance with
ties broken by the lower point index.
"""

import math

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud

__all__ = ["SpatialIndex", "build_index", "octree_downsample", "cluster_points"]


class SpatialIndex:
    """Immutable nearest-neighbor index over a fixed (N, 3) coordinate set.

    Queries return exactly the exhaustive-search result: candidates come from
    a k-d tree, are re-ranked by squared distance recomputed in numpy, and tie
    groups at the boundary are resolved by growing the candidate set until the
    boundary distance is strictly larger than the k-th.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        self._points = pts
        self._tree = cKDTree(pts)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def knn(self, query, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points to ``query``, ascending distance."""
        n = len(self._points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} must satisfy 1 <= k <= {n}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        kk = min(n, k + 4)
        while True:
            dist, idx = self._tree.query(q, k=kk)
            dist = np.atleast_1d(dist)
            idx = np.atleast_1d(idx)
            if kk == n or dist[kk - 1] > dist[k - 1]:
                break
            kk = min(n, 2 * kk)  # boundary tie: widen until the tie group is inside
        diff = self._points[idx] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((idx, d2))
        return idx[order[:k]]

    def radius(self, query, r: float) -> np.ndarray:
        """Indices of all points within distance ``r`` of ``query`` (closed ball)."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(q, r), dtype=np.intp)
        if idx.size == 0:
            return idx
        diff = self._points[idx] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((idx, d2))
        return idx[order]

    def knn_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for many queries.

        Returns ``(indices, distances)`` of shape (M, k), each row sorted by
        (distance, index). Rows are canonically ordered within the candidate
        set returned by the tree; unlike :meth:`knn`, boundary tie groups are
        not grown (bulk callers operate on noisy data where exact boundary
        ties do not arise).
        """
        n = len(self._points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} must satisfy 1 <= k <= {n}")
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(qs)
        dist, idx = self._tree.query(qs, k=k)
        idx = idx.reshape(m, k)
        diff = self._points[idx] - qs[:, None, :]
        d2 = np.einsum("mkj,mkj->mk", diff, diff)
        rows = np.repeat(np.arange(m), k)
        order = np.lexsort((idx.ravel(), d2.ravel(), rows))
        idx_sorted = idx.ravel()[order].reshape(m, k)
        d_sorted = np.sqrt(d2.ravel()[order].reshape(m, k))
        return idx_sorted, d_sorted


def build_index(cloud: PointCloud) -> SpatialIndex:
    """Build a :class:`SpatialIndex` over a non-empty cloud."""
    if len(cloud) == 0:
        raise ValueError("cannot index an empty cloud")
    return SpatialIndex(cloud.points)


# ---------------------------------------------------------------------------
# octree resampling
# ---------------------------------------------------------------------------

def octree_downsample(cloud: PointCloud, cell_size: float) -> PointCloud:
    """Resample by octree occupancy: one centroid per occupied leaf cell.

    The octree root is a cube anchored on the absolute ``cell_size`` lattice
    (at the lattice cell containing the bounding-box minimum) with side
    ``cell_size * 2**depth``, subdivided until leaves have side exactly
    ``cell_size``. Anchoring on the lattice rather than the bounding box
    itself makes the operation idempotent: every centroid stays inside its
    own cell, so a second pass reproduces the cloud bit for bit. Output
    order follows a depth-first traversal with children visited in
    (x, y, z)-bit order.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("cannot downsample an empty cloud")
    lo = np.floor(pts.min(axis=0) / cell_size) * cell_size
    extent = float((pts.max(axis=0) - lo).max())
    if extent <= cell_size:
        depth = 0
    else:
        depth = int(math.ceil(math.log2(extent / cell_size)))
        while cell_size * (2.0 ** depth) < extent:  # guard against log2 rounding
            depth += 1
    out: list[np.ndarray] = []

    def visit(indices: np.ndarray, origin: np.ndarray, level: int, side: float) -> None:
        if level == 0 or indices.size == 1:
            out.append(pts[indices].mean(axis=0))
            return
        half = side / 2.0
        mid = origin + half
        bits = pts[indices] >= mid  # (m, 3) booleans
        codes = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2] * 1
        for code in range(8):
            sub = indices[codes == code]
            if sub.size == 0:
                continue
            offset = np.array([(code >> 2) & 1, (code >> 1) & 1, code & 1], dtype=np.float64)
            visit(sub, origin + offset * half, level - 1, half)

    visit(np.arange(len(pts)), lo, depth, cell_size * (2.0 ** depth))
    return PointCloud(points=np.asarray(out))


# ---------------------------------------------------------------------------
# balanced spatial clustering
# ---------------------------------------------------------------------------

def cluster_points(cloud: PointCloud, target_cluster_size: int) -> list[np.ndarray]:
    """Partition point indices into spatially contiguous clusters.

    Recursive median splits along the widest axis until every leaf holds at
    most ``target_cluster_size`` points. The returned index arrays are sorted
    ascending and form a partition of ``range(len(cloud))``.
    """
    n = len(cloud)
    if not 1 <= target_cluster_size <= n:
        raise ValueError(
            f"target_cluster_size={target_cluster_size} must satisfy 1 <= t <= {n}"
        )
    pts = cloud.points
    clusters: list[np.ndarray] = []

    def split(indices: np.ndarray) -> None:
        if indices.size <= target_cluster_size:
            clusters.append(np.sort(indices))
            return
        sub = pts[indices]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = np.argsort(sub[:, axis], kind="stable")
        half = indices.size // 2
        split(indices[order[:half]])
        split(indices[order[half:]])

    split(np.arange(n))
    return clusters
