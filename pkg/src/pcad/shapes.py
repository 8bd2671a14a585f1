"""Procedural desk-scale part generator and dataset assembly.

Four part families are supported — washer, ring (torus), hex_nut, and bolt —
each sampled uniformly by surface area with optional Gaussian surface noise
applied along the analytic normals.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cloud import DatasetSplit, PointCloud
from .defects import DefectConfig, generate

__all__ = ["ShapeSpec", "make_shape", "make_dataset"]

KINDS = ("washer", "ring", "hex_nut", "bolt")

_DEFAULT_DIMS = {
    "washer": {"outer_radius": 12.0, "inner_radius": 6.0, "height": 2.5},
    "ring": {"major_radius": 10.0, "tube_radius": 2.5},
    "hex_nut": {"width": 10.0, "hole_radius": 2.8, "height": 4.0},
    "bolt": {
        "head_width": 9.0,
        "head_height": 3.0,
        "shaft_radius": 2.6,
        "shaft_length": 13.0,
        "thread_pitch": 1.8,
        "thread_depth": 0.22,
    },
}


@dataclass
class ShapeSpec:
    """Recipe for one sampled part: kind, point count, dimensions, noise, seed.

    ``params`` overrides the per-kind default dimensions (millimeters); see
    ``_DEFAULT_DIMS`` for the available keys.
    """

    kind: str
    n_points: int = 4096
    noise_sigma: float = 0.02
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.n_points < 512:
            raise ValueError("n_points must be >= 512")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        unknown = set(self.params) - set(_DEFAULT_DIMS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        dims = self.dims()
        if any(v <= 0 for v in dims.values()):
            raise ValueError("all shape dimensions must be positive")
        if self.kind == "washer" and dims["inner_radius"] >= dims["outer_radius"]:
            raise ValueError("washer inner_radius must be smaller than outer_radius")
        if self.kind == "ring" and dims["tube_radius"] >= dims["major_radius"]:
            raise ValueError("ring tube_radius must be smaller than major_radius")
        if self.kind == "hex_nut" and dims["hole_radius"] >= dims["width"] / 2:
            raise ValueError("hex_nut hole_radius must be smaller than width/2")
        if self.kind == "bolt":
            if dims["shaft_radius"] + dims["thread_depth"] >= dims["head_width"] / 2:
                raise ValueError("bolt shaft must fit inside the head")
            if dims["thread_depth"] >= dims["shaft_radius"]:
                raise ValueError("bolt thread_depth must be smaller than shaft_radius")

    def dims(self) -> dict:
        merged = dict(_DEFAULT_DIMS[self.kind])
        merged.update(self.params)
        return merged


# ---------------------------------------------------------------------------
# surface samplers: each returns (points, normals) for m samples
# ---------------------------------------------------------------------------

def _annulus(rng, m, r_in, r_out, z, nz):
    rr = np.sqrt(rng.uniform(r_in**2, r_out**2, m))
    th = rng.uniform(0.0, 2.0 * np.pi, m)
    pts = np.column_stack([rr * np.cos(th), rr * np.sin(th), np.full(m, float(z))])
    normals = np.tile([0.0, 0.0, float(nz)], (m, 1))
    return pts, normals


def _cylinder_wall(rng, m, radius, z_lo, z_hi, sign):
    th = rng.uniform(0.0, 2.0 * np.pi, m)
    z = rng.uniform(z_lo, z_hi, m)
    cos, sin = np.cos(th), np.sin(th)
    pts = np.column_stack([radius * cos, radius * sin, z])
    normals = np.column_stack([sign * cos, sign * sin, np.zeros(m)])
    return pts, normals


_HEX_AXES = np.array(
    [[np.cos(a), np.sin(a)] for a in (0.0, np.pi / 3.0, 2.0 * np.pi / 3.0)]
)


def _in_hexagon(xy, width):
    return np.all(np.abs(xy @ _HEX_AXES.T) <= width / 2.0, axis=1)


def _hex_face(rng, m, width, hole_radius, z, nz):
    # rejection sampling from the bounding box of the hexagon
    vertex_r = width / np.sqrt(3.0)
    out = np.empty((m, 2))
    filled = 0
    while filled < m:
        batch = max(2 * (m - filled), 64)
        x = rng.uniform(-width / 2.0, width / 2.0, batch)
        y = rng.uniform(-vertex_r, vertex_r, batch)
        xy = np.column_stack([x, y])
        ok = _in_hexagon(xy, width)
        if hole_radius > 0:
            ok &= (xy**2).sum(axis=1) >= hole_radius**2
        xy = xy[ok]
        take = min(len(xy), m - filled)
        out[filled : filled + take] = xy[:take]
        filled += take
    pts = np.column_stack([out, np.full(m, float(z))])
    normals = np.tile([0.0, 0.0, float(nz)], (m, 1))
    return pts, normals


def _hex_side(rng, m, width, z_lo, z_hi, face_index):
    angle = face_index * np.pi / 3.0
    n2 = np.array([np.cos(angle), np.sin(angle)])
    t2 = np.array([-np.sin(angle), np.cos(angle)])
    side = width / np.sqrt(3.0)
    u = rng.uniform(-side / 2.0, side / 2.0, m)
    z = rng.uniform(z_lo, z_hi, m)
    xy = (width / 2.0) * n2 + u[:, None] * t2
    pts = np.column_stack([xy, z])
    normals = np.column_stack([np.tile(n2, (m, 1)), np.zeros(m)])
    return pts, normals


def _torus(rng, m, major, tube):
    # minor angle is area-weighted by (R + a*cos(phi)); rejection sample it
    phi = np.empty(m)
    filled = 0
    while filled < m:
        batch = max(2 * (m - filled), 64)
        cand = rng.uniform(0.0, 2.0 * np.pi, batch)
        u = rng.uniform(0.0, 1.0, batch)
        accepted = cand[u < (major + tube * np.cos(cand)) / (major + tube)]
        take = min(len(accepted), m - filled)
        phi[filled : filled + take] = accepted[:take]
        filled += take
    theta = rng.uniform(0.0, 2.0 * np.pi, m)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cos_p, sin_p = np.cos(phi), np.sin(phi)
    ring_r = major + tube * cos_p
    pts = np.column_stack([ring_r * cos_t, ring_r * sin_t, tube * sin_p])
    normals = np.column_stack([cos_p * cos_t, cos_p * sin_t, sin_p])
    return pts, normals


def _threaded_shaft(rng, m, radius, length, pitch, depth):
    th = rng.uniform(0.0, 2.0 * np.pi, m)
    z = rng.uniform(-length, 0.0, m)
    r = radius + depth * np.sin(th - 2.0 * np.pi * z / pitch)
    cos, sin = np.cos(th), np.sin(th)
    pts = np.column_stack([r * cos, r * sin, z])
    normals = np.column_stack([cos, sin, np.zeros(m)])
    return pts, normals


def _surfaces(spec: ShapeSpec):
    """List of (area, sampler) pairs for the spec's solid."""
    d = spec.dims()
    hex_area = lambda w: (np.sqrt(3.0) / 2.0) * w**2  # noqa: E731

    if spec.kind == "washer":
        r_o, r_i, h = d["outer_radius"], d["inner_radius"], d["height"]
        face = np.pi * (r_o**2 - r_i**2)
        return [
            (face, lambda rng, m: _annulus(rng, m, r_i, r_o, h / 2.0, 1.0)),
            (face, lambda rng, m: _annulus(rng, m, r_i, r_o, -h / 2.0, -1.0)),
            (2 * np.pi * r_o * h, lambda rng, m: _cylinder_wall(rng, m, r_o, -h / 2.0, h / 2.0, 1.0)),
            (2 * np.pi * r_i * h, lambda rng, m: _cylinder_wall(rng, m, r_i, -h / 2.0, h / 2.0, -1.0)),
        ]

    if spec.kind == "ring":
        major, tube = d["major_radius"], d["tube_radius"]
        return [(4.0 * np.pi**2 * major * tube, lambda rng, m: _torus(rng, m, major, tube))]

    if spec.kind == "hex_nut":
        w, r, h = d["width"], d["hole_radius"], d["height"]
        side = w / np.sqrt(3.0)
        face = hex_area(w) - np.pi * r**2
        surfaces = [
            (face, lambda rng, m: _hex_face(rng, m, w, r, h / 2.0, 1.0)),
            (face, lambda rng, m: _hex_face(rng, m, w, r, -h / 2.0, -1.0)),
            (2 * np.pi * r * h, lambda rng, m: _cylinder_wall(rng, m, r, -h / 2.0, h / 2.0, -1.0)),
        ]
        for i in range(6):
            surfaces.append(
                (side * h, lambda rng, m, i=i: _hex_side(rng, m, w, -h / 2.0, h / 2.0, i))
            )
        return surfaces

    # bolt: hex head on z in [0, head_height], threaded shaft hanging below
    w, hh = d["head_width"], d["head_height"]
    r0, length = d["shaft_radius"], d["shaft_length"]
    pitch, depth = d["thread_pitch"], d["thread_depth"]
    side = w / np.sqrt(3.0)
    surfaces = [
        (hex_area(w), lambda rng, m: _hex_face(rng, m, w, 0.0, hh, 1.0)),
        (hex_area(w) - np.pi * r0**2, lambda rng, m: _hex_face(rng, m, w, r0, 0.0, -1.0)),
        (2 * np.pi * r0 * length, lambda rng, m: _threaded_shaft(rng, m, r0, length, pitch, depth)),
        (np.pi * r0**2, lambda rng, m: _annulus(rng, m, 0.0, r0, -length, -1.0)),
    ]
    for i in range(6):
        surfaces.append((side * hh, lambda rng, m, i=i: _hex_side(rng, m, w, 0.0, hh, i)))
    return surfaces


def make_shape(spec: ShapeSpec) -> PointCloud:
    """Sample ``spec.n_points`` points uniformly by area over the part surface.

    Surface noise (``spec.noise_sigma``) displaces each point along its
    analytic normal; the normals returned on the cloud are the pre-noise
    analytic ones. Deterministic per ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    surfaces = _surfaces(spec)
    areas = np.array([a for a, _ in surfaces])
    choice = rng.choice(len(surfaces), size=spec.n_points, p=areas / areas.sum())

    pts = np.empty((spec.n_points, 3))
    normals = np.empty((spec.n_points, 3))
    for i, (_, sampler) in enumerate(surfaces):
        mask = choice == i
        count = int(mask.sum())
        if count:
            p, nv = sampler(rng, count)
            pts[mask] = p
            normals[mask] = nv
    if spec.noise_sigma > 0:
        pts = pts + normals * rng.normal(0.0, spec.noise_sigma, spec.n_points)[:, None]
    return PointCloud(points=pts, normals=normals)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _seed_from(seq: np.random.SeedSequence) -> int:
    words = seq.generate_state(2)
    return (int(words[0]) << 32) | int(words[1])


def make_dataset(
    specs,
    n_train: int,
    n_test_normal: int,
    n_test_abnormal: int,
    defect_config: DefectConfig,
    seed: int,
    strength_range: tuple[float, float] | None = None,
) -> DatasetSplit:
    """Assemble a train/test split from shape specs, with injected defects.

    Counts are per spec entry. Train, test-normal, and test-abnormal clouds
    draw their sampling seeds from disjoint child streams of ``seed``, so the
    splits are disjoint by construction and the whole dataset is reproducible
    from ``(specs, seed)``. Abnormal clouds are perturbed copies of fresh
    normal clouds, with labels taken from the injection's supervision mask;
    ``strength_range`` (when given) draws a per-cloud defect strength
    uniformly from that band in place of ``defect_config.strength``.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("at least one ShapeSpec is required")
    if min(n_train, n_test_normal, n_test_abnormal) < 1:
        raise ValueError("all split counts must be >= 1")
    if strength_range is not None:
        lo, hi = strength_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("strength_range must satisfy 0 < lo <= hi <= 1")

    root = np.random.SeedSequence(seed)
    s_train, s_test, s_abn, s_defect = root.spawn(4)
    train_seeds = s_train.spawn(len(specs) * n_train)
    test_seeds = s_test.spawn(len(specs) * n_test_normal)
    abn_seeds = s_abn.spawn(len(specs) * n_test_abnormal)
    defect_seeds = s_defect.spawn(len(specs) * n_test_abnormal)

    train_normal = []
    test_normal = []
    test_abnormal = []
    pos = 0
    for spec in specs:
        for _ in range(n_train):
            train_normal.append(
                make_shape(dataclasses.replace(spec, seed=_seed_from(train_seeds[pos])))
            )
            pos += 1
    pos = 0
    for spec in specs:
        for _ in range(n_test_normal):
            test_normal.append(
                make_shape(dataclasses.replace(spec, seed=_seed_from(test_seeds[pos])))
            )
            pos += 1
    pos = 0
    for spec in specs:
        for _ in range(n_test_abnormal):
            base = make_shape(dataclasses.replace(spec, seed=_seed_from(abn_seeds[pos])))
            rng = np.random.default_rng(defect_seeds[pos])
            if strength_range is not None:
                strength = float(rng.uniform(strength_range[0], strength_range[1]))
            else:
                strength = defect_config.strength
            sample = generate(
                base,
                strength,
                defect_config.mode,
                defect_config,
                seed=int(rng.integers(2**63)),
            )
            test_abnormal.append(sample.perturbed.replace(labels=sample.supervision))
            pos += 1

    total = len(train_normal) + len(test_normal) + len(test_abnormal)
    return DatasetSplit(
        train_normal=train_normal,
        test_normal=test_normal,
        test_abnormal=test_abnormal,
        anomaly_rate=len(test_abnormal) / total,
    )
