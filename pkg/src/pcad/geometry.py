"""Per-point differential-geometry estimates and statistical denoising."""

import logging

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)

__all__ = ["estimate_normals_curvature", "denoise_statistical"]


def estimate_normals_curvature(
    cloud: PointCloud, k: int, return_warnings: bool = False
):
    """Estimate per-point normals and surface-variation curvature.

    For each point, the covariance of its k-nearest-neighbor patch (the point
    itself included) is eigen-decomposed. The normal is the eigenvector of
    the smallest eigenvalue, sign-oriented away from the cloud centroid; the
    curvature is the surface variation ``lam_min / (lam0 + lam1 + lam2)``
    rescaled by 3 onto [0, 1] (exactly 1 for an isotropic patch, 0 for an
    exact plane).

    Degenerate patches (all neighbors coincident) get curvature 0 and an
    arbitrary unit normal; their indices are logged, and returned as a second
    value when ``return_warnings`` is set.
    """
    n = len(cloud)
    if not 3 <= k < n:
        raise ValueError(f"k={k} must satisfy 3 <= k < {n}")
    pts = cloud.points
    index = SpatialIndex(pts)
    idx, _ = index.knn_batch(pts, k)

    patches = pts[idx]  # (N, k, 3)
    centered = patches - patches.mean(axis=1, keepdims=True)
    cov = centered.transpose(0, 2, 1) @ centered / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    lam = np.clip(eigvals, 0.0, None)
    total = lam.sum(axis=1)
    degenerate = total <= 0.0

    curvature = np.zeros(n)
    ok = ~degenerate
    curvature[ok] = 3.0 * lam[ok, 0] / total[ok]
    curvature = np.clip(curvature, 0.0, 1.0)

    normals = eigvecs[:, :, 0].copy()
    normals[degenerate] = (0.0, 0.0, 1.0)
    centroid = pts.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, pts - centroid) < 0.0
    normals[flip] *= -1.0
    # eigh returns unit eigenvectors; renormalize to keep the container's
    # tolerance regardless of accumulated rounding
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    warned = np.nonzero(degenerate)[0]
    if warned.size:
        logger.warning(
            "%d degenerate neighborhoods (coincident points); curvature set to 0",
            warned.size,
        )
    result = cloud.replace(normals=normals, curvatures=curvature)
    if return_warnings:
        return result, warned
    return result


def denoise_statistical(
    cloud: PointCloud,
    k: int,
    std_ratio: float,
    iterate: bool = False,
    max_passes: int = 10,
) -> tuple[PointCloud, np.ndarray]:
    """Remove sparse outliers by the mean-neighbor-distance criterion.

    A point is removed when its mean distance to its ``k`` nearest neighbors
    (self excluded) is strictly greater than ``mean + std_ratio * std`` of
    that statistic over the current cloud. With ``iterate`` the pass repeats
    on the surviving points until stable, capped at ``max_passes``.

    Returns the filtered cloud and the removed indices (into the original
    cloud, ascending).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if std_ratio <= 0:
        raise ValueError("std_ratio must be positive")
    n = len(cloud)
    if n <= k:
        raise ValueError(f"cloud must have more than k={k} points, got {n}")

    pts = cloud.points
    keep = np.arange(n)
    removed: list[np.ndarray] = []
    passes = max_passes if iterate else 1
    for _ in range(passes):
        if keep.size <= k:
            break
        current = pts[keep]
        tree = cKDTree(current)
        dist, _ = tree.query(current, k=k + 1)
        stat = dist[:, 1:].mean(axis=1)
        threshold = stat.mean() + std_ratio * stat.std()
        bad = stat > threshold
        if not bad.any():
            break
        removed.append(keep[bad])
        keep = keep[~bad]

    removed_idx = (
        np.sort(np.concatenate(removed)) if removed else np.empty(0, dtype=np.intp)
    )
    return cloud.subset(keep), removed_idx
