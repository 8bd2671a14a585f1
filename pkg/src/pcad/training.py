"""Expert-apprentice training on synthetic defects, and anomaly scoring.

Per step, a fresh synthetic defect is injected into one training cloud, both
encoders embed the perturbed cloud, and the apprentice descends a weighted
margin loss: distances to the (frozen) expert shrink on normal points and
grow on the synthetic-defect points. Scoring a cloud is the per-point
expert-apprentice feature distance.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .defects import (
    DefectConfig,
    generate,
    generate_unguided,
    prepare_source,
)
from .encoder import (
    EncoderParams,
    FeatureMap,
    encode_features,
    encode_features_backward,
    init_params,
    local_descriptors,
)
from .spatial import cluster_points

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingDivergedError",
    "TrainConfig",
    "DiscrepancyBatch",
    "ScoreReport",
    "point_distances",
    "split_by_mask",
    "focal_weights",
    "discrepancy_loss",
    "loss_distance_grads",
    "train",
    "anomaly_scores",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""


@dataclass
class TrainConfig:
    """Training hyperparameters and the per-step defect distribution."""

    epochs: int = 20
    learning_rate: float = 1e-3
    alpha: float = 0.01
    batch_size: int = 1
    seed: int = 0
    k: int = 16
    strength_range: tuple = (0.008, 0.0228)
    mode: str = "random"
    weight_cap: float = 1e3
    defects: DefectConfig = field(default_factory=DefectConfig)
    distill_only: bool = False      # drop the synthetic-margin term (plain distillation)
    random_regions: bool = False    # swap the guided generator for blind jitter

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        lo, hi = self.strength_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("strength_range must satisfy 0 < lo <= hi <= 1")
        if self.weight_cap <= 0:
            raise ValueError("weight_cap must be positive")


@dataclass
class DiscrepancyBatch:
    """Distances and focal weights for one masked cloud, split by role."""

    d_normal: np.ndarray
    d_synth: np.ndarray
    w_normal: np.ndarray
    w_synth: np.ndarray
    alpha: float

    @classmethod
    def from_distances(cls, distances, mask, alpha, weight_cap=1e3):
        d_normal, d_synth = split_by_mask(distances, mask)
        return cls(
            d_normal=d_normal,
            d_synth=d_synth,
            w_normal=focal_weights(d_normal, alpha, "normal", weight_cap),
            w_synth=focal_weights(d_synth, alpha, "synth", weight_cap),
            alpha=alpha,
        )


@dataclass
class ScoreReport:
    """Per-point anomaly scores plus the aggregated object score."""

    point_scores: np.ndarray
    object_score: float
    cloud_id: str | None = None
    aggregate: str = "top_pct"


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------

def point_distances(f_apprentice: FeatureMap, f_expert: FeatureMap) -> np.ndarray:
    """Per-point Euclidean distance between two aligned feature maps."""
    a, e = f_apprentice.features, f_expert.features
    if a.shape != e.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {e.shape}")
    return np.linalg.norm(a - e, axis=1)


def split_by_mask(distances, mask) -> tuple[np.ndarray, np.ndarray]:
    """Split distances into (normal, synthetic) by the anomaly mask."""
    distances = np.asarray(distances, dtype=np.float64)
    mask = np.asarray(mask)
    if distances.shape != mask.shape:
        raise ValueError(
            f"distances ({distances.shape}) and mask ({mask.shape}) differ in length"
        )
    positive = mask.astype(bool)
    return distances[~positive], distances[positive]


def focal_weights(distances, alpha: float, role: str, cap: float = 1e3) -> np.ndarray:
    """Per-point focal weights: the distance-to-mean ratio raised to +-alpha.

    The normal role uses exponent +alpha (emphasizing points that drift above
    the average distance), the synth role -alpha (emphasizing anomalies whose
    distance is still small) — the exponents are deliberately opposite. A
    list of identical distances (all-zero included) weights to exactly 1; a
    zero distance under the negative exponent is clamped at ``cap``.
    """
    if role not in ("normal", "synth"):
        raise ValueError("role must be 'normal' or 'synth'")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        return np.empty(0)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if alpha == 0.0 or d.min() == d.max():
        return np.ones(d.size)
    ratio = d * d.size / d.sum()
    exponent = alpha if role == "normal" else -alpha
    with np.errstate(divide="ignore"):
        weights = ratio**exponent
    return np.minimum(weights, cap)


def discrepancy_loss(batch: DiscrepancyBatch) -> float:
    """Weighted margin between normal and synthetic distances.

    ``(sum(w_n * d_n) - sum(w_s * d_s)) / (sum(w_n) + sum(w_s))`` — finite,
    increasing in the normal distances and decreasing in the synthetic ones,
    and invariant under uniform rescaling of all weights. With no synthetic
    points it degrades to the weighted mean of the normal distances.
    """
    if batch.d_normal.size == 0 and batch.d_synth.size == 0:
        raise ValueError("empty batch")
    num = batch.w_normal @ batch.d_normal - batch.w_synth @ batch.d_synth
    den = batch.w_normal.sum() + batch.w_synth.sum()
    return float(num / den)


def loss_distance_grads(batch: DiscrepancyBatch) -> tuple[np.ndarray, np.ndarray]:
    """d(loss)/d(distance) per point, treating the weights as constants.

    Normal points get ``+w / sum(w)`` and synthetic points ``-w / sum(w)``,
    so descending the loss pulls normal distances down and pushes synthetic
    distances up.
    """
    den = batch.w_normal.sum() + batch.w_synth.sum()
    return batch.w_normal / den, -batch.w_synth / den


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _seed_from(seq: np.random.SeedSequence) -> int:
    words = seq.generate_state(2)
    return (int(words[0]) << 32) | int(words[1])


def _feature_grad(fa, fe, mask, g_normal, g_synth):
    """Chain d(loss)/d(distance) through the per-point distance to F^a."""
    diff = fa - fe
    dists = np.linalg.norm(diff, axis=1)
    g_d = np.empty(len(dists))
    positive = np.asarray(mask).astype(bool)
    g_d[~positive] = g_normal
    g_d[positive] = g_synth
    safe = np.where(dists > 0.0, dists, 1.0)
    return (g_d / safe)[:, None] * diff * (dists > 0.0)[:, None]


def train(
    train_clouds: list[PointCloud],
    config: TrainConfig,
    expert: EncoderParams,
) -> tuple[EncoderParams, list[dict]]:
    """Fit an apprentice encoder against a frozen expert.

    Every epoch visits each training cloud once, injecting a fresh synthetic
    defect (strength drawn from ``config.strength_range``), and applies one
    adaptive-moment gradient step per ``batch_size`` clouds. Returns the
    trained apprentice and the per-step history records (step, loss,
    mean_d_n, mean_d_s). Deterministic per ``config.seed``; the expert is
    never touched.
    """
    if not train_clouds:
        raise ValueError("training set must be non-empty")
    if not expert.frozen:
        raise ValueError("the expert encoder must be frozen")

    root = np.random.SeedSequence(config.seed)
    s_init, s_schedule = root.spawn(2)
    apprentice = init_params(expert.dims, seed=_seed_from(s_init), frozen=False)
    schedule = np.random.default_rng(s_schedule)

    # the analysis stage (normals, clusters, region choice) is deterministic
    # per cloud, so it is computed once and reused across epochs
    if config.random_regions:
        cluster_cache = [
            cluster_points(c, config.defects.target_cluster_size) for c in train_clouds
        ]
        prepared_cache = [None] * len(train_clouds)
    else:
        prepared_cache = [prepare_source(c, config.defects) for c in train_clouds]
        cluster_cache = [None] * len(train_clouds)

    params = apprentice.weights + apprentice.biases
    moment1 = [np.zeros_like(p) for p in params]
    moment2 = [np.zeros_like(p) for p in params]
    pending = [np.zeros_like(p) for p in params]
    pending_count = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam_t = 0

    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        for ci, cloud in enumerate(train_clouds):
            strength = float(
                schedule.uniform(config.strength_range[0], config.strength_range[1])
            )
            defect_seed = int(schedule.integers(2**63))
            if config.random_regions:
                sample = generate_unguided(
                    cloud, strength, config.mode, config.defects, defect_seed,
                    clusters=cluster_cache[ci],
                )
            else:
                sample = generate(
                    cloud, strength, config.mode, config.defects, defect_seed,
                    prepared=prepared_cache[ci],
                )

            try:
                desc = local_descriptors(sample.perturbed.points, config.k)
                f_expert = encode_features(desc, expert)
                f_app, cache = encode_features(desc, apprentice, return_cache=True)
            except ValueError as exc:
                raise TrainingDivergedError(
                    f"step {step}: forward pass failed ({exc}); "
                    f"parameter norms: {[float(np.abs(p).max()) for p in params]}"
                ) from exc

            mask = sample.supervision
            distances = point_distances(f_app, f_expert)
            d_normal, d_synth = split_by_mask(distances, mask)
            if config.distill_only:
                # ablation: minimize the normal-point distances only; the
                # synthetic rows exist in the cloud but carry zero gradient
                batch = DiscrepancyBatch(
                    d_normal=d_normal,
                    d_synth=np.empty(0),
                    w_normal=np.ones(d_normal.size),
                    w_synth=np.empty(0),
                    alpha=0.0,
                )
                g_normal, _ = loss_distance_grads(batch)
                grad_features = _feature_grad(
                    f_app.features, f_expert.features, mask, g_normal,
                    np.zeros(d_synth.size),
                )
            else:
                batch = DiscrepancyBatch.from_distances(
                    distances, mask, config.alpha, config.weight_cap
                )
                g_normal, g_synth = loss_distance_grads(batch)
                grad_features = _feature_grad(
                    f_app.features, f_expert.features, mask, g_normal, g_synth
                )

            loss = discrepancy_loss(batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"step {step}: non-finite loss; "
                    f"parameter norms: {[float(np.abs(p).max()) for p in params]}"
                )

            w_grads, b_grads = encode_features_backward(
                desc, apprentice, grad_features, cache=cache
            )
            for buf, g in zip(pending, w_grads + b_grads):
                buf += g
            pending_count += 1

            if pending_count == config.batch_size:
                adam_t += 1
                lr_t = config.learning_rate * (
                    np.sqrt(1.0 - beta2**adam_t) / (1.0 - beta1**adam_t)
                )
                for p, m, v, g in zip(params, moment1, moment2, pending):
                    g /= pending_count
                    m *= beta1
                    m += (1.0 - beta1) * g
                    v *= beta2
                    v += (1.0 - beta2) * g * g
                    p -= lr_t * m / (np.sqrt(v) + eps)
                    g[:] = 0.0
                pending_count = 0

            history.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "cloud": ci,
                    "loss": loss,
                    "mean_d_n": float(d_normal.mean()) if d_normal.size else 0.0,
                    "mean_d_s": float(d_synth.mean()) if d_synth.size else 0.0,
                }
            )
            step += 1
        logger.debug("epoch %d done, loss %.6f", epoch, history[-1]["loss"])

    return apprentice, history


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def anomaly_scores(
    cloud: PointCloud,
    expert: EncoderParams,
    apprentice: EncoderParams,
    k: int,
    aggregate: str = "top_pct",
    top_fraction: float = 0.01,
    top_k: int = 10,
    cloud_id: str | None = None,
) -> ScoreReport:
    """Per-point anomaly scores (expert-apprentice feature distance) plus an
    object-level aggregate: the mean of the top ``top_fraction`` point scores
    by default, or ``max`` / mean of the ``top_k`` highest."""
    if expert.dims != apprentice.dims:
        raise ValueError(
            f"encoder dims differ: expert {expert.dims} vs apprentice {apprentice.dims}"
        )
    if aggregate not in ("top_pct", "top_k", "max"):
        raise ValueError("aggregate must be 'top_pct', 'top_k', or 'max'")
    desc = local_descriptors(cloud.points, k)
    scores = point_distances(
        encode_features(desc, apprentice), encode_features(desc, expert)
    )
    if aggregate == "max":
        object_score = float(scores.max())
    else:
        if aggregate == "top_pct":
            count = max(1, int(np.ceil(len(scores) * top_fraction)))
        else:
            count = min(max(1, top_k), len(scores))
        object_score = float(np.sort(scores)[-count:].mean())
    return ScoreReport(
        point_scores=scores,
        object_score=object_score,
        cloud_id=cloud_id,
        aggregate=aggregate,
    )
