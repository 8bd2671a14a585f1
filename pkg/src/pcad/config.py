"""Run configuration: defaults, JSON loading, validation, and builders that
turn config blocks into the typed configs of each module."""

import copy
import json

from .defects import DefectConfig
from .metrics import EvalConfig
from .shapes import KINDS, ShapeSpec
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "dataset_spec",
    "defect_config",
    "train_config",
    "eval_config",
]


class ConfigError(ValueError):
    """Raised when a run configuration fails validation."""


DEFAULTS = {
    "seed": 0,
    "dataset": {
        "categories": ["washer", "ring", "hex_nut", "bolt"],
        "n_points": 4096,
        "noise_sigma": 0.02,
        "n_train": 50,
        "n_test_normal": 100,
        "n_test_abnormal": 60,
        "strength_range": [0.008, 0.0228],
        "shape_params": {},
    },
    "defects": {
        "curvature_threshold": 0.2,
        "target_cluster_size": 256,
        "strength": 0.015,
        "mode": "random",
        "knn_k": 16,
        "cluster_stat": "mean",
    },
    "encoder": {
        "dims": [3, 32, 48],
        "k": 16,
    },
    "trainer": {
        "epochs": 8,
        "learning_rate": 0.0005,
        "alpha": 0.01,
        "batch_size": 1,
        "strength_range": [0.008, 0.0228],
        "mode": "random",
        "weight_cap": 1000.0,
    },
    "eval": {
        "aggregate": "top_pct",
        "top_fraction": 0.01,
        "pooling": "global",
        "workers": 1,
    },
}

# blocks whose contents are validated downstream rather than by shape
_FREE_FORM = {("dataset", "shape_params")}


def _merge(defaults, override, path=()):
    if not isinstance(override, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        base = defaults[key]
        here = path + (key,)
        if isinstance(base, dict) and here not in _FREE_FORM:
            merged[key] = _merge(base, value, here)
        else:
            merged[key] = _check_type(base, value, here)
    return merged


def _check_type(default, value, path):
    name = ".".join(path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{name} must be an object")
    return value


def load_config(path: str | None = None) -> dict:
    """Load and validate a run config, merging over the defaults.

    ``path=None`` returns the defaults. Unknown keys and wrong value types
    are rejected; block-level semantic checks happen in the builders below.
    """
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    block = cfg["dataset"]
    if not block["categories"]:
        raise ConfigError("dataset.categories must not be empty")
    for kind in block["categories"]:
        if kind not in KINDS:
            raise ConfigError(f"dataset.categories entry {kind!r} not one of {KINDS}")
    return cfg


def dataset_spec(cfg: dict, kind: str) -> ShapeSpec:
    """ShapeSpec template for one category (seed filled in by make_dataset)."""
    block = cfg["dataset"]
    try:
        return ShapeSpec(
            kind=kind,
            n_points=block["n_points"],
            noise_sigma=block["noise_sigma"],
            seed=0,
            params=dict(block["shape_params"].get(kind, {})),
        )
    except ValueError as exc:
        raise ConfigError(f"dataset block invalid for {kind!r}: {exc}") from exc


def defect_config(cfg: dict) -> DefectConfig:
    try:
        return DefectConfig(**cfg["defects"])
    except ValueError as exc:
        raise ConfigError(f"defects block invalid: {exc}") from exc


def train_config(cfg: dict, seed: int, distill_only=False, random_regions=False) -> TrainConfig:
    block = cfg["trainer"]
    try:
        return TrainConfig(
            epochs=block["epochs"],
            learning_rate=block["learning_rate"],
            alpha=block["alpha"],
            batch_size=block["batch_size"],
            seed=seed,
            k=cfg["encoder"]["k"],
            strength_range=tuple(block["strength_range"]),
            mode=block["mode"],
            weight_cap=block["weight_cap"],
            defects=defect_config(cfg),
            distill_only=distill_only,
            random_regions=random_regions,
        )
    except ValueError as exc:
        raise ConfigError(f"trainer block invalid: {exc}") from exc


def eval_config(cfg: dict) -> EvalConfig:
    block = cfg["eval"]
    try:
        return EvalConfig(
            k=cfg["encoder"]["k"],
            aggregate=block["aggregate"],
            top_fraction=block["top_fraction"],
            pooling=block["pooling"],
            workers=block["workers"],
        )
    except ValueError as exc:
        raise ConfigError(f"eval block invalid: {exc}") from exc


def encoder_dims(cfg: dict) -> tuple:
    dims = cfg["encoder"]["dims"]
    if len(dims) < 2 or any(not isinstance(d, int) or d < 1 for d in dims):
        raise ConfigError(f"encoder.dims must be a chain of positive integers, got {dims}")
    if dims[0] != 3:
        raise ConfigError("encoder.dims must start at the 3-channel descriptor width")
    return tuple(dims)
