"""Per-point feature encoder: a single set-abstraction level.

Each point gathers its k nearest neighbors, forms scale-normalized relative
coordinates, pushes every neighbor through a shared rectified dense stack,
max-pools over the neighborhood, and applies one final dense layer. Both the
forward pass and the exact reverse-mode gradient are implemented here; the
max-pool routes gradient to the argmax neighbor (ties to the lowest index).
"""

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .spatial import SpatialIndex

__all__ = [
    "EncoderParams",
    "FeatureMap",
    "init_params",
    "params_checksum",
    "save_params",
    "load_params",
    "local_descriptors",
    "encode_features",
    "encode_features_backward",
    "encode",
    "encode_backward",
]


@dataclass
class EncoderParams:
    """Dense-layer weights of one encoder instance.

    ``dims`` chains descriptor width through hidden widths to the feature
    dimension; ``weights[i]`` has shape ``(dims[i+1], dims[i])``. All layers
    but the last form the shared per-neighbor stack; the last layer runs after
    pooling. ``frozen`` marks parameters that no training step may mutate.
    """

    dims: tuple
    weights: list
    biases: list
    seed: int
    frozen: bool

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2:
            raise ValueError("dims needs at least an input and an output width")
        if any(d < 1 for d in self.dims):
            raise ValueError("zero-width layer in dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.dims[i + 1], self.dims[i])
            if w.shape != expect:
                raise ValueError(f"weights[{i}] has shape {w.shape}, expected {expect}")
            if b.shape != (self.dims[i + 1],):
                raise ValueError(f"biases[{i}] has shape {b.shape}")

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]


@dataclass
class FeatureMap:
    """N x D per-point features, row-aligned with the encoded cloud."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")

    def __len__(self) -> int:
        return len(self.features)


def init_params(dims, seed: int, frozen: bool = False) -> EncoderParams:
    """Draw weights uniformly in +-1/sqrt(fan_in) (variance 1/(3 fan_in));
    biases start at zero. Deterministic per seed."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid dims chain {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(dims=dims, weights=weights, biases=biases, seed=int(seed), frozen=frozen)


def params_checksum(params: EncoderParams) -> str:
    """SHA-256 over dims, flags, and the raw parameter bytes."""
    digest = hashlib.sha256()
    digest.update(repr((params.dims, params.frozen, params.seed)).encode())
    for w, b in zip(params.weights, params.biases):
        digest.update(np.ascontiguousarray(w).tobytes())
        digest.update(np.ascontiguousarray(b).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint files (bit-exact JSON round trip)
# ---------------------------------------------------------------------------

def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=np.float64).tobytes()).decode()


def save_params(params: EncoderParams, path: str, extra: dict | None = None) -> None:
    payload = {
        "schema": "pcad-encoder",
        "version": 1,
        "dims": list(params.dims),
        "seed": params.seed,
        "frozen": params.frozen,
        "weights": [_encode_array(w) for w in params.weights],
        "biases": [_encode_array(b) for b in params.biases],
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def load_params(path: str, return_extra: bool = False):
    with open(path, "r") as f:
        payload = json.load(f)
    if payload.get("schema") != "pcad-encoder" or payload.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 encoder checkpoint")
    dims = tuple(payload["dims"])
    weights = [
        np.frombuffer(base64.b64decode(blob), dtype=np.float64)
        .reshape(dims[i + 1], dims[i])
        .copy()
        for i, blob in enumerate(payload["weights"])
    ]
    biases = [
        np.frombuffer(base64.b64decode(blob), dtype=np.float64).copy()
        for blob in payload["biases"]
    ]
    params = EncoderParams(
        dims=dims,
        weights=weights,
        biases=biases,
        seed=int(payload["seed"]),
        frozen=bool(payload["frozen"]),
    )
    if return_extra:
        return params, payload.get("extra", {})
    return params


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def local_descriptors(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k, 3) relative neighbor coordinates, scaled by the patch radius.

    Neighborhoods include the point itself; a patch of coincident points
    (radius zero) yields all-zero descriptors.
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite coordinates")
    if len(points) < k:
        raise ValueError(f"cloud of {len(points)} points is smaller than k={k}")
    index = SpatialIndex(points)
    idx, dist = index.knn_batch(points, k)
    radius = dist[:, -1].copy()
    radius[radius == 0.0] = 1.0
    rel = points[idx] - points[:, None, :]
    return rel / radius[:, None, None]


def _forward(desc: np.ndarray, params: EncoderParams):
    n, k, c = desc.shape
    if c != params.dims[0]:
        raise ValueError(
            f"descriptor width {c} does not match encoder input width {params.dims[0]}"
        )
    h = desc.reshape(n * k, c)
    inputs = [h]
    pre_acts = []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w.T + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        inputs.append(h)
    width = h.shape[1]
    grouped = h.reshape(n, k, width)
    arg = grouped.argmax(axis=1)  # first maximum = lowest neighbor index
    pooled = np.take_along_axis(grouped, arg[:, None, :], axis=1)[:, 0, :]
    features = pooled @ params.weights[-1].T + params.biases[-1]
    cache = {"inputs": inputs, "pre_acts": pre_acts, "arg": arg, "pooled": pooled}
    return features, cache


def encode_features(desc: np.ndarray, params: EncoderParams, return_cache: bool = False):
    """Encode precomputed descriptors (see :func:`local_descriptors`)."""
    features, cache = _forward(desc, params)
    fmap = FeatureMap(features)
    if return_cache:
        return fmap, cache
    return fmap


def encode_features_backward(
    desc: np.ndarray,
    params: EncoderParams,
    upstream: np.ndarray,
    cache: dict | None = None,
):
    """Gradient of ``sum(upstream * features)`` w.r.t. every parameter.

    Returns ``(weight_grads, bias_grads)`` shaped like ``params.weights`` and
    ``params.biases``. Refuses frozen parameters.
    """
    if params.frozen:
        raise ValueError("refusing to differentiate frozen parameters")
    n, k, _ = desc.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (n, params.dims[-1]):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match ({n}, {params.dims[-1]})"
        )
    if cache is None:
        _, cache = _forward(desc, params)
    pooled, arg = cache["pooled"], cache["arg"]
    inputs, pre_acts = cache["inputs"], cache["pre_acts"]

    weight_grads = [None] * len(params.weights)
    bias_grads = [None] * len(params.biases)
    weight_grads[-1] = upstream.T @ pooled
    bias_grads[-1] = upstream.sum(axis=0)

    g_pooled = upstream @ params.weights[-1]  # (n, width)
    width = g_pooled.shape[1]
    g_grouped = np.zeros((n, k, width))
    np.put_along_axis(g_grouped, arg[:, None, :], g_pooled[:, None, :], axis=1)
    g = g_grouped.reshape(n * k, width)
    for j in reversed(range(len(params.weights) - 1)):
        g = g * (pre_acts[j] > 0.0)
        weight_grads[j] = g.T @ inputs[j]
        bias_grads[j] = g.sum(axis=0)
        g = g @ params.weights[j]
    return weight_grads, bias_grads


def encode(cloud: PointCloud, params: EncoderParams, k: int) -> FeatureMap:
    """Per-point features for a cloud; deterministic and translation-invariant
    (descriptors are relative coordinates)."""
    desc = local_descriptors(cloud.points, k)
    return encode_features(desc, params)


def encode_backward(cloud: PointCloud, params: EncoderParams, k: int, upstream: np.ndarray):
    """Parameter gradients for :func:`encode` under ``upstream`` feature grads."""
    desc = local_descriptors(cloud.points, k)
    return encode_features_backward(desc, params, upstream)
