"""Threshold-free metrics (tie-aware AUROC / AUPR) and the benchmark runner."""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .cloud import DatasetSplit, PointCloud
from .encoder import EncoderParams
from .training import ScoreReport, anomaly_scores

__all__ = [
    "UndefinedMetricError",
    "auroc",
    "aupr",
    "EvalConfig",
    "BenchmarkResult",
    "evaluate",
    "combine_results",
]

METRIC_KEYS = ("object_auroc", "object_aupr", "point_auroc", "point_aupr")


class UndefinedMetricError(ValueError):
    """Raised when a metric is requested for a degenerate label set."""


def _check_pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D"
        )
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auroc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form with tie half-credit.

    Equals P(positive outscores negative) + 0.5 P(tie). Both classes must be
    present; a single-class input raises :class:`UndefinedMetricError` rather
    than silently reporting 0.5.
    """
    scores, positive = _check_pair(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes (got {n_pos} positives, {n_neg} negatives)"
        )
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Area under the precision-recall curve by descending-score sweep.

    Tie groups are processed atomically; the area is the step sum
    ``sum(delta_recall * precision)``. Constant scores give exactly the
    positive ratio. Raises :class:`UndefinedMetricError` with no positives.
    """
    scores, positive = _check_pair(scores, labels)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive label")

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = positive[order].astype(np.float64)
    # last position of each tie group in the descending order
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    group_ends = np.append(boundary, sorted_scores.size - 1)

    tp = np.cumsum(sorted_pos)[group_ends]
    predicted = group_ends + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    delta_recall = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(delta_recall * precision))


# ---------------------------------------------------------------------------
# benchmark runner
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    """Scoring and pooling options for the benchmark runner."""

    k: int = 16
    aggregate: str = "top_pct"
    top_fraction: float = 0.01
    pooling: str = "global"  # or "per_cloud"
    workers: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.pooling not in ("global", "per_cloud"):
            raise ValueError("pooling must be 'global' or 'per_cloud'")
        if self.aggregate not in ("top_pct", "top_k", "max"):
            raise ValueError("aggregate must be 'top_pct', 'top_k', or 'max'")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must be in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class BenchmarkResult:
    """Per-category metric rows plus their arithmetic mean and run metadata."""

    per_category: dict
    mean: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in list(self.per_category.values()) + [self.mean]:
            for key in METRIC_KEYS:
                value = row[key]
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{key}={value} outside [0, 1]")

    @classmethod
    def from_rows(cls, per_category: dict, metadata: dict | None = None):
        mean = {
            key: float(np.mean([row[key] for row in per_category.values()]))
            for key in METRIC_KEYS
        }
        return cls(per_category=dict(per_category), mean=mean, metadata=metadata or {})

    def to_json_dict(self) -> dict:
        return {
            "per_category": self.per_category,
            "mean": self.mean,
            "metadata": self.metadata,
        }

    def to_csv_text(self) -> str:
        lines = ["category," + ",".join(METRIC_KEYS)]
        for name in sorted(self.per_category):
            row = self.per_category[name]
            lines.append(name + "," + ",".join(f"{row[k]:.6f}" for k in METRIC_KEYS))
        lines.append("mean," + ",".join(f"{self.mean[k]:.6f}" for k in METRIC_KEYS))
        return "\n".join(lines) + "\n"


def _config_hash(config: EvalConfig) -> str:
    blob = json.dumps(
        {
            "k": config.k,
            "aggregate": config.aggregate,
            "top_fraction": config.top_fraction,
            "pooling": config.pooling,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def score_clouds(
    clouds: list[PointCloud],
    expert: EncoderParams,
    apprentice: EncoderParams,
    config: EvalConfig,
) -> list[ScoreReport]:
    """Score many clouds, optionally with a small thread pool; the result
    order always matches the input order."""
    def job(cloud):
        return anomaly_scores(
            cloud, expert, apprentice, config.k,
            aggregate=config.aggregate, top_fraction=config.top_fraction,
        )

    workers = max(1, int(os.environ.get("PCAD_THREADS", config.workers)))
    if workers == 1 or len(clouds) <= 1:
        return [job(c) for c in clouds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, clouds))


def evaluate(
    split: DatasetSplit,
    expert: EncoderParams,
    apprentice: EncoderParams,
    config: EvalConfig,
    category: str = "default",
) -> BenchmarkResult:
    """Object- and point-level AUROC/AUPR for one labeled split.

    Object level compares per-cloud aggregated scores against cloud labels;
    point level pools per-point scores across all test clouds (or averages
    per-cloud metrics over the abnormal clouds when configured). Deterministic
    for fixed inputs.
    """
    if not split.test_normal and not split.test_abnormal:
        raise ValueError("split has no test clouds")
    if not split.test_normal or not split.test_abnormal:
        raise UndefinedMetricError(
            f"category {category!r} lacks both test classes "
            f"({len(split.test_normal)} normal, {len(split.test_abnormal)} abnormal)"
        )

    reports_normal = score_clouds(split.test_normal, expert, apprentice, config)
    reports_abnormal = score_clouds(split.test_abnormal, expert, apprentice, config)

    object_scores = np.array(
        [r.object_score for r in reports_normal + reports_abnormal]
    )
    object_labels = np.concatenate(
        [np.zeros(len(reports_normal)), np.ones(len(reports_abnormal))]
    )
    object_auroc = auroc(object_scores, object_labels)
    object_aupr = aupr(object_scores, object_labels)

    if config.pooling == "global":
        point_scores = np.concatenate(
            [r.point_scores for r in reports_normal + reports_abnormal]
        )
        point_labels = np.concatenate(
            [np.zeros(len(r.point_scores)) for r in reports_normal]
            + [c.labels for c in split.test_abnormal]
        )
        point_auroc = auroc(point_scores, point_labels)
        point_aupr = aupr(point_scores, point_labels)
    else:
        per_auroc, per_aupr = [], []
        for report, cloud in zip(reports_abnormal, split.test_abnormal):
            per_auroc.append(auroc(report.point_scores, cloud.labels))
            per_aupr.append(aupr(report.point_scores, cloud.labels))
        point_auroc = float(np.mean(per_auroc))
        point_aupr = float(np.mean(per_aupr))

    row = {
        "object_auroc": object_auroc,
        "object_aupr": object_aupr,
        "point_auroc": point_auroc,
        "point_aupr": point_aupr,
    }
    metadata = {
        "config_hash": _config_hash(config),
        "pooling": config.pooling,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    return BenchmarkResult.from_rows({category: row}, metadata)


def combine_results(results: list[BenchmarkResult]) -> BenchmarkResult:
    """Merge per-category results into one table with a recomputed mean row."""
    if not results:
        raise ValueError("no results to combine")
    rows: dict = {}
    for result in results:
        for name, row in result.per_category.items():
            if name in rows:
                raise ValueError(f"duplicate category {name!r}")
            rows[name] = row
    return BenchmarkResult.from_rows(rows, dict(results[0].metadata))
