"""Synthetic surface-defect injection.

A normal cloud is partitioned into spatial clusters; each cluster is scored
by its curvature plus its centroid's distance from the cloud center, and the
highest-scoring region receives the perturbation — either a bump of added
points offset along the surface normals, or a contiguous patch removal.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .geometry import estimate_normals_curvature
from .spatial import cluster_points

__all__ = [
    "DefectConfig",
    "RegionScore",
    "SynthSample",
    "PreparedSource",
    "prepare_source",
    "score_regions",
    "select_region",
    "add_points",
    "remove_points",
    "generate",
    "generate_unguided",
]

MODES = ("add", "remove", "random")


@dataclass
class DefectConfig:
    """Knobs for defect placement and sizing."""

    curvature_threshold: float = 0.2
    target_cluster_size: int = 256
    strength: float = 0.015
    mode: str = "random"
    knn_k: int = 16
    cluster_stat: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.curvature_threshold <= 1.0:
            raise ValueError("curvature_threshold must lie in [0, 1]")
        if self.target_cluster_size < 1:
            raise ValueError("target_cluster_size must be >= 1")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("strength must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.knn_k < 3:
            raise ValueError("knn_k must be >= 3")
        if self.cluster_stat not in ("mean", "max"):
            raise ValueError("cluster_stat must be 'mean' or 'max'")


@dataclass
class RegionScore:
    """Candidate region ranking entry.

    ``score`` is ``distance_to_center + curvature`` for eligible regions
    (cluster curvature above the threshold) and ``None`` for ineligible ones.
    """

    cluster_id: int
    centroid: np.ndarray
    curvature: float
    distance_to_center: float
    score: float | None

    @property
    def eligible(self) -> bool:
        return self.score is not None


@dataclass
class SynthSample:
    """A source cloud paired with its perturbed twin.

    ``mask`` flags the appended points on the perturbed cloud (all zero for
    remove mode, where the affected points no longer exist); ``supervision``
    is the mask actually used for training and labels — identical to ``mask``
    for add mode, and the ring of surviving points bordering the hole for
    remove mode. ``removed_indices`` are indices into ``source``.
    """

    source: PointCloud
    perturbed: PointCloud
    mask: np.ndarray
    supervision: np.ndarray
    mode: str
    strength: float
    region_id: int
    seed: int
    removed_indices: np.ndarray


@dataclass
class PreparedSource:
    """Geometry shared by every perturbation of one source cloud: the cloud
    with normals/curvature attached, its clusters, and the selected region."""

    cloud: PointCloud
    clusters: list
    region_id: int
    scores: list


# ---------------------------------------------------------------------------
# region scoring and selection
# ---------------------------------------------------------------------------

def score_regions(
    cloud: PointCloud,
    clusters,
    curvature_threshold: float,
    cluster_stat: str = "mean",
) -> list[RegionScore]:
    """Score each cluster by distance-from-center plus cluster curvature.

    Clusters whose curvature statistic does not exceed ``curvature_threshold``
    are marked ineligible (``score=None``). The cloud must carry curvatures.
    """
    if not clusters:
        raise ValueError("clusters must be non-empty")
    if not 0.0 <= curvature_threshold <= 1.0:
        raise ValueError("curvature_threshold must lie in [0, 1]")
    if cloud.curvatures is None:
        raise ValueError("cloud has no curvatures; run estimate_normals_curvature first")
    center = cloud.points.mean(axis=0)
    stat = np.mean if cluster_stat == "mean" else np.max
    scores = []
    for cid, members in enumerate(clusters):
        members = np.asarray(members)
        centroid = cloud.points[members].mean(axis=0)
        curvature = float(stat(cloud.curvatures[members]))
        distance = float(np.linalg.norm(centroid - center))
        eligible = curvature > curvature_threshold
        scores.append(
            RegionScore(
                cluster_id=cid,
                centroid=centroid,
                curvature=curvature,
                distance_to_center=distance,
                score=distance + curvature if eligible else None,
            )
        )
    return scores


def select_region(scores: list[RegionScore]) -> int:
    """Pick the eligible region with the highest score.

    Falls back to the highest-curvature cluster when nothing clears the
    threshold; ties resolve to the lowest cluster_id.
    """
    if not scores:
        raise ValueError("scores must be non-empty")
    eligible = [s for s in scores if s.score is not None]
    if eligible:
        best = max(eligible, key=lambda s: (s.score, -s.cluster_id))
    else:
        best = max(scores, key=lambda s: (s.curvature, -s.cluster_id))
    return best.cluster_id


def _local_spacing(points: np.ndarray, region: np.ndarray, k: int) -> float:
    """Mean k-NN distance over the region's points (self excluded)."""
    k = min(k, len(points) - 1)
    tree = cKDTree(points)
    dist, _ = tree.query(points[region], k=k + 1)
    return float(dist[:, 1:].mean())


# ---------------------------------------------------------------------------
# perturbation primitives
# ---------------------------------------------------------------------------

def add_points(
    cloud: PointCloud,
    region: np.ndarray,
    budget: int,
    rng: np.random.Generator,
    knn_k: int = 16,
) -> tuple[PointCloud, np.ndarray]:
    """Append ``budget`` bump points over the region.

    Each new point starts at a sampled region point, moves along that point's
    normal by a height drawn uniformly in [0.5, 2.0] times the region's local
    mean neighbor spacing, and receives isotropic jitter within a ball of
    0.25 spacing. Displacements are clamped so every new point stays inside
    twice the region's bounding radius around the region centroid.

    Returns the extended cloud and a mask marking exactly the appended points.
    """
    region = np.asarray(region)
    if region.size == 0:
        raise ValueError("region must be non-empty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if cloud.normals is None:
        raise ValueError("cloud has no normals; run estimate_normals_curvature first")

    pts = cloud.points
    spacing = _local_spacing(pts, region, knn_k)
    if spacing == 0.0:
        spacing = 1.0  # fully coincident region; any finite bump scale works

    base = rng.choice(region, size=budget, replace=True)
    heights = rng.uniform(0.5, 2.0, budget) * spacing
    direction = rng.standard_normal((budget, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    jitter_r = 0.25 * spacing * rng.uniform(0.0, 1.0, budget) ** (1.0 / 3.0)
    displacement = cloud.normals[base] * heights[:, None] + direction * jitter_r[:, None]

    centroid = pts[region].mean(axis=0)
    bounding_r = float(np.linalg.norm(pts[region] - centroid, axis=1).max())
    if bounding_r == 0.0:
        bounding_r = spacing
    cap = 2.0 * bounding_r
    new_pts = pts[base] + displacement
    overshoot = np.linalg.norm(new_pts - centroid, axis=1)
    too_far = overshoot > cap
    if too_far.any():
        allowed = cap - np.linalg.norm(pts[base[too_far]] - centroid, axis=1)
        norm = np.linalg.norm(displacement[too_far], axis=1)
        scale = (1.0 - 1e-9) * allowed / norm
        new_pts[too_far] = pts[base[too_far]] + displacement[too_far] * scale[:, None]

    n = len(pts)
    out = PointCloud(
        points=np.vstack([pts, new_pts]),
        normals=np.vstack([cloud.normals, cloud.normals[base]]),
        curvatures=None
        if cloud.curvatures is None
        else np.concatenate([cloud.curvatures, cloud.curvatures[base]]),
        labels=None
        if cloud.labels is None
        else np.concatenate([cloud.labels, np.ones(budget, dtype=np.uint8)]),
    )
    mask = np.zeros(n + budget, dtype=np.uint8)
    mask[n:] = 1
    return out, mask


def remove_points(
    cloud: PointCloud,
    region: np.ndarray,
    budget: int,
    rng: np.random.Generator,
) -> tuple[PointCloud, np.ndarray]:
    """Delete a contiguous patch of ``budget`` points from the region.

    A seed point is sampled from the region and removed together with its
    budget-1 nearest within-region neighbors. Returns the reduced cloud and
    the removed indices (into the input cloud, ascending).
    """
    region = np.asarray(region)
    if not 1 <= budget < region.size:
        raise ValueError(
            f"budget={budget} must satisfy 1 <= budget < region size {region.size}"
        )
    pts = cloud.points
    seed_idx = region[rng.integers(region.size)]
    diff = pts[region] - pts[seed_idx]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((region, d2))
    removed = np.sort(region[order[:budget]])
    keep = np.setdiff1d(np.arange(len(pts)), removed, assume_unique=True)
    return cloud.subset(keep), removed


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def prepare_source(cloud: PointCloud, config: DefectConfig) -> PreparedSource:
    """Run the deterministic analysis stage once for a source cloud:
    normals/curvature, clustering, region scoring, and region selection."""
    if cloud.normals is None or cloud.curvatures is None:
        cloud = estimate_normals_curvature(cloud, config.knn_k)
    clusters = cluster_points(cloud, config.target_cluster_size)
    scores = score_regions(cloud, clusters, config.curvature_threshold, config.cluster_stat)
    region_id = select_region(scores)
    return PreparedSource(cloud=cloud, clusters=clusters, region_id=region_id, scores=scores)


def _resolve_mode(mode: str, rng: np.random.Generator) -> str:
    if mode == "random":
        return "add" if rng.random() < 0.5 else "remove"
    return mode


def _grow_region(points: np.ndarray, region: np.ndarray, needed: int) -> np.ndarray:
    # a region smaller than the removal budget widens to the nearest points
    # around its centroid so the cardinality contract still holds
    centroid = points[region].mean(axis=0)
    diff = points - centroid
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((np.arange(len(points)), d2))
    return np.sort(order[:needed])


def _boundary_supervision(
    source_pts: np.ndarray,
    survivor_pts: np.ndarray,
    removed: np.ndarray,
    spacing: float,
) -> np.ndarray:
    """Mark surviving points within one spacing of any removed point."""
    tree = cKDTree(source_pts[removed])
    dist, _ = tree.query(survivor_pts)
    supervision = (dist <= spacing).astype(np.uint8)
    if supervision.sum() == 0:
        # hole too isolated for the ring test: fall back to the survivor
        # nearest the removed patch so the sample always carries a positive
        supervision[int(np.argmin(dist))] = 1
    return supervision


def generate(
    cloud: PointCloud,
    strength: float,
    mode: str,
    config: DefectConfig,
    seed: int,
    prepared: PreparedSource | None = None,
) -> SynthSample:
    """Inject one synthetic defect: cluster, score, select, perturb.

    The point budget is ``int(len(cloud) * strength)``. ``prepared`` may pass
    in the reusable analysis stage (see :func:`prepare_source`); the result is
    identical either way and deterministic per ``seed``.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must lie in (0, 1]")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    budget = int(len(cloud) * strength)
    if budget < 1:
        raise ValueError(
            f"cloud of {len(cloud)} points is too small for strength {strength}"
        )
    if prepared is None:
        prepared = prepare_source(cloud, config)
    source = prepared.cloud
    rng = np.random.default_rng(seed)
    resolved = _resolve_mode(mode, rng)
    region = prepared.clusters[prepared.region_id]

    if resolved == "add":
        perturbed, mask = add_points(source, region, budget, rng, config.knn_k)
        supervision = mask.copy()
        removed = np.empty(0, dtype=np.intp)
    else:
        if budget >= region.size:
            region = _grow_region(source.points, region, budget + 1)
        perturbed, removed = remove_points(source, region, budget, rng)
        mask = np.zeros(len(perturbed), dtype=np.uint8)
        spacing = _local_spacing(source.points, region, config.knn_k)
        supervision = _boundary_supervision(
            source.points, perturbed.points, removed, spacing
        )

    return SynthSample(
        source=source,
        perturbed=perturbed,
        mask=mask,
        supervision=supervision,
        mode=resolved,
        strength=strength,
        region_id=prepared.region_id,
        seed=seed,
        removed_indices=removed,
    )


def generate_unguided(
    cloud: PointCloud,
    strength: float,
    mode: str,
    config: DefectConfig,
    seed: int,
    clusters: list | None = None,
) -> SynthSample:
    """Ablation generator: uniform random jitter over a random region.

    Replaces the whole morphological pipeline with its simplest stand-in — a
    uniformly chosen cluster whose points are displaced in place by uniform
    per-axis jitter of up to one local spacing. Keeps the budget contract of
    :func:`generate` (exactly ``int(len(cloud) * strength)`` flagged points)
    but never adds or removes points; ``mode`` is accepted for signature
    parity and recorded as ``"jitter"``.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must lie in (0, 1]")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    budget = int(len(cloud) * strength)
    if budget < 1:
        raise ValueError(
            f"cloud of {len(cloud)} points is too small for strength {strength}"
        )
    if clusters is None:
        clusters = cluster_points(cloud, config.target_cluster_size)
    rng = np.random.default_rng(seed)
    region_id = int(rng.integers(len(clusters)))
    region = clusters[region_id]
    pts = cloud.points

    if budget <= region.size:
        chosen = np.sort(rng.choice(region, size=budget, replace=False))
    else:
        chosen = _grow_region(pts, region, budget)
    spacing = _local_spacing(pts, region, config.knn_k)
    if spacing == 0.0:
        spacing = 1.0

    new_pts = pts.copy()
    new_pts[chosen] += rng.uniform(-spacing, spacing, (budget, 3))
    perturbed = cloud.replace(points=new_pts)
    mask = np.zeros(len(perturbed), dtype=np.uint8)
    mask[chosen] = 1

    return SynthSample(
        source=cloud,
        perturbed=perturbed,
        mask=mask,
        supervision=mask.copy(),
        mode="jitter",
        strength=strength,
        region_id=region_id,
        seed=seed,
        removed_indices=np.empty(0, dtype=np.intp),
    )
