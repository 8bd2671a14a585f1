"""Unsupervised anomaly detection for 3D point clouds.

The package trains a pair of point-cloud feature encoders — a frozen,
randomly initialized *expert* and a trainable *apprentice* — so that their
features agree on normal surface geometry and disagree on defects. Training
data needs no real anomalies: synthetic defects are injected into clean
clouds by analyzing their geometry (curvature-guided region choice, then
adding a bump of outlier points or carving out a contiguous patch). At test
time the per-point feature distance between the two encoders is the anomaly
score.

Modules:

- ``cloud``: point-cloud container and .xyz/.ply I/O
- ``spatial``: k-NN/radius queries, octree downsampling, clustering
- ``geometry``: normal/curvature estimation, statistical denoising
- ``shapes``: procedural desk-object corpus (washer, ring, hex nut, bolt)
- ``defects``: geometry-guided synthetic defect injection
- ``encoder``: the shared encoder, its gradients, and checkpoints
- ``training``: discrepancy loss, the training loop, per-point scoring
- ``metrics``: AUROC/AUPR and the evaluation harness
- ``config`` / ``cli``: run configuration and the ``pcad`` command
"""

from .cloud import (
    CloudFormatError,
    DatasetSplit,
    EmptyCloudError,
    PointCloud,
    load_cloud,
    save_cloud,
)
from .defects import DefectConfig, SynthSample, generate, generate_unguided
from .encoder import (
    EncoderParams,
    FeatureMap,
    encode,
    init_params,
    load_params,
    params_checksum,
    save_params,
)
from .geometry import denoise_statistical, estimate_normals_curvature
from .metrics import (
    BenchmarkResult,
    EvalConfig,
    UndefinedMetricError,
    aupr,
    auroc,
    combine_results,
    evaluate,
)
from .shapes import ShapeSpec, make_dataset, make_shape
from .spatial import SpatialIndex, build_index, cluster_points, octree_downsample
from .training import (
    TrainConfig,
    TrainingDivergedError,
    anomaly_scores,
    discrepancy_loss,
    focal_weights,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkResult",
    "CloudFormatError",
    "DatasetSplit",
    "DefectConfig",
    "EmptyCloudError",
    "EncoderParams",
    "EvalConfig",
    "FeatureMap",
    "PointCloud",
    "ShapeSpec",
    "SpatialIndex",
    "SynthSample",
    "TrainConfig",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "anomaly_scores",
    "aupr",
    "auroc",
    "build_index",
    "cluster_points",
    "combine_results",
    "denoise_statistical",
    "discrepancy_loss",
    "encode",
    "estimate_normals_curvature",
    "evaluate",
    "focal_weights",
    "generate",
    "generate_unguided",
    "init_params",
    "load_cloud",
    "load_params",
    "make_dataset",
    "make_shape",
    "octree_downsample",
    "params_checksum",
    "save_cloud",
    "save_params",
    "train",
    "__version__",
]
