"""Procedural shape sampler tests: exact surface membership at zero noise,
area-weighted densities, noise direction, and dataset assembly."""

import numpy as np
import pytest

from pcad.defects import DefectConfig
from pcad.shapes import KINDS, ShapeSpec, make_dataset, make_shape

TOL = 1e-9

_HEX_AXES = np.array(
    [[np.cos(a), np.sin(a)] for a in (0.0, np.pi / 3.0, 2.0 * np.pi / 3.0)]
)


def hex_extent(xy):
    """max_i |xy . axis_i|: equals width/2 exactly on the prism wall."""
    return np.abs(xy @ _HEX_AXES.T).max(axis=1)


def washer_residual(pts, d):
    r_o, r_i, h = d["outer_radius"], d["inner_radius"], d["height"]
    rho = np.hypot(pts[:, 0], pts[:, 1])
    z = pts[:, 2]
    in_band = (rho >= r_i - TOL) & (rho <= r_o + TOL)
    in_slab = np.abs(z) <= h / 2.0 + TOL
    face = np.minimum(np.abs(z - h / 2.0), np.abs(z + h / 2.0))
    wall = np.minimum(np.abs(rho - r_o), np.abs(rho - r_i))
    res = np.where(in_band, face, np.inf)
    return np.minimum(res, np.where(in_slab, wall, np.inf))


def ring_residual(pts, d):
    rho = np.hypot(pts[:, 0], pts[:, 1])
    return np.abs(
        np.hypot(rho - d["major_radius"], pts[:, 2]) - d["tube_radius"]
    )


def hex_nut_residual(pts, d):
    w, r, h = d["width"], d["hole_radius"], d["height"]
    rho = np.hypot(pts[:, 0], pts[:, 1])
    z = pts[:, 2]
    ext = hex_extent(pts[:, :2])
    inside = (ext <= w / 2.0 + TOL) & (rho >= r - TOL) & (np.abs(z) <= h / 2.0 + TOL)
    face = np.minimum(np.abs(z - h / 2.0), np.abs(z + h / 2.0))
    boundary = np.minimum(face, np.minimum(np.abs(rho - r), np.abs(ext - w / 2.0)))
    return np.where(inside, boundary, np.inf)


def bolt_residual(pts, d):
    w, hh = d["head_width"], d["head_height"]
    r0, length = d["shaft_radius"], d["shaft_length"]
    pitch, depth = d["thread_pitch"], d["thread_depth"]
    x, y, z = pts.T
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    ext = hex_extent(pts[:, :2])
    in_hex = ext <= w / 2.0 + TOL

    res = np.full(len(pts), np.inf)
    res = np.where(in_hex, np.abs(z - hh), res)  # top face
    res = np.minimum(
        res, np.where(in_hex & (rho >= r0 - TOL), np.abs(z), np.inf)
    )  # under-head annulus
    in_head_band = (z >= -TOL) & (z <= hh + TOL)
    res = np.minimum(res, np.where(in_head_band, np.abs(ext - w / 2.0), np.inf))
    thread_r = r0 + depth * np.sin(theta - 2.0 * np.pi * z / pitch)
    in_shaft_band = (z <= TOL) & (z >= -length - TOL)
    res = np.minimum(res, np.where(in_shaft_band, np.abs(rho - thread_r), np.inf))
    res = np.minimum(
        res, np.where(rho <= r0 + TOL, np.abs(z + length), np.inf)
    )  # bottom cap
    return res


_RESIDUALS = {
    "washer": washer_residual,
    "ring": ring_residual,
    "hex_nut": hex_nut_residual,
    "bolt": bolt_residual,
}


# ---------------------------------------------------------------------------
# surface membership and density
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_noise_free_points_lie_on_surface(kind):
    spec = ShapeSpec(kind, n_points=2048, noise_sigma=0.0, seed=77)
    cloud = make_shape(spec)
    res = _RESIDUALS[kind](cloud.points, spec.dims())
    assert res.max() < TOL
    np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-9)
    assert len(cloud) == 2048


def test_make_shape_deterministic():
    spec = ShapeSpec("hex_nut", n_points=600, noise_sigma=0.02, seed=5)
    one = make_shape(spec)
    two = make_shape(spec)
    np.testing.assert_array_equal(one.points, two.points)
    np.testing.assert_array_equal(one.normals, two.normals)
    other = make_shape(ShapeSpec("hex_nut", n_points=600, noise_sigma=0.02, seed=6))
    assert not np.array_equal(one.points, other.points)


def test_noise_displaces_along_normals():
    clean = make_shape(ShapeSpec("washer", n_points=4096, noise_sigma=0.0, seed=3))
    noisy = make_shape(ShapeSpec("washer", n_points=4096, noise_sigma=0.05, seed=3))
    disp = noisy.points - clean.points
    along = np.einsum("ij,ij->i", disp, clean.normals)
    perp = disp - along[:, None] * clean.normals
    np.testing.assert_allclose(perp, 0.0, atol=1e-12)
    np.testing.assert_allclose(along.std(), 0.05, rtol=0.1)
    np.testing.assert_allclose(along.mean(), 0.0, atol=0.005)
    # the reported normals are the pre-noise analytic ones
    np.testing.assert_array_equal(noisy.normals, clean.normals)


def test_washer_angles_uniform():
    cloud = make_shape(ShapeSpec("washer", n_points=4096, noise_sigma=0.0, seed=11))
    theta = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    counts, _ = np.histogram(theta, bins=12, range=(-np.pi, np.pi))
    expected = 4096 / 12.0
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 40.0  # 11 dof; uniform sampling sits near 11


def test_torus_minor_angle_area_weighted():
    spec = ShapeSpec("ring", n_points=8192, noise_sigma=0.0, seed=13)
    d = spec.dims()
    major, tube = d["major_radius"], d["tube_radius"]
    pts = make_shape(spec).points
    rho = np.hypot(pts[:, 0], pts[:, 1])
    phi = np.arctan2(pts[:, 2], rho - major)
    edges = np.linspace(-np.pi, np.pi, 13)
    counts, _ = np.histogram(phi, bins=edges)
    # bin mass follows the ring-radius weight (major + tube*cos(phi))
    mass = major * np.diff(edges) + tube * np.diff(np.sin(edges))
    expected = 8192 * mass / (2.0 * np.pi * major)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 40.0
    # sanity: the inner rim really is sparser than the outer rim
    assert counts[5] + counts[6] > counts[0] + counts[11]


def test_params_override_dimensions():
    cloud = make_shape(
        ShapeSpec("washer", n_points=1024, noise_sigma=0.0, seed=1,
                  params={"outer_radius": 20.0})
    )
    rho = np.hypot(cloud.points[:, 0], cloud.points[:, 1])
    assert rho.max() > 19.0
    assert rho.max() <= 20.0 + TOL


def test_spec_validation():
    with pytest.raises(ValueError):
        ShapeSpec("sphere")
    with pytest.raises(ValueError):
        ShapeSpec("washer", n_points=100)
    with pytest.raises(ValueError):
        ShapeSpec("washer", noise_sigma=-0.1)
    with pytest.raises(ValueError):
        ShapeSpec("washer", params={"radius": 3.0})  # not a washer key
    with pytest.raises(ValueError):
        ShapeSpec("washer", params={"inner_radius": 13.0})  # >= outer
    with pytest.raises(ValueError):
        ShapeSpec("ring", params={"tube_radius": 11.0})
    with pytest.raises(ValueError):
        ShapeSpec("hex_nut", params={"hole_radius": 5.0})
    with pytest.raises(ValueError):
        ShapeSpec("bolt", params={"thread_depth": 3.0})
    with pytest.raises(ValueError):
        ShapeSpec("bolt", params={"shaft_radius": 4.4})  # cannot fit the head
    with pytest.raises(ValueError):
        ShapeSpec("washer", params={"height": 0.0})


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _small_dataset(seed=19):
    specs = [
        ShapeSpec("washer", n_points=512, noise_sigma=0.02),
        ShapeSpec("ring", n_points=512, noise_sigma=0.02),
    ]
    return make_dataset(
        specs,
        n_train=2,
        n_test_normal=2,
        n_test_abnormal=3,
        defect_config=DefectConfig(mode="add"),
        seed=seed,
        strength_range=(0.008, 0.0228),
    )


def test_make_dataset_counts_and_labels():
    split = _small_dataset()
    assert len(split.train_normal) == 4
    assert len(split.test_normal) == 4
    assert len(split.test_abnormal) == 6
    assert split.anomaly_rate == 6 / 14
    for cloud in split.train_normal + split.test_normal:
        assert cloud.labels is None
    for cloud in split.test_abnormal:
        assert cloud.labels is not None
        flagged = int(cloud.labels.sum())
        assert flagged >= 1
        # add-mode defects append their points, all of them flagged
        assert len(cloud) == 512 + flagged


def test_make_dataset_deterministic():
    one = _small_dataset()
    two = _small_dataset()
    np.testing.assert_array_equal(
        one.train_normal[0].points, two.train_normal[0].points
    )
    np.testing.assert_array_equal(
        one.test_abnormal[-1].points, two.test_abnormal[-1].points
    )
    np.testing.assert_array_equal(
        one.test_abnormal[-1].labels, two.test_abnormal[-1].labels
    )
    other = _small_dataset(seed=20)
    assert not np.array_equal(
        one.train_normal[0].points, other.train_normal[0].points
    )


def test_make_dataset_strength_range_varies_defect_size():
    split = _small_dataset()
    sums = {int(c.labels.sum()) for c in split.test_abnormal}
    assert len(sums) > 1  # per-cloud strengths drawn from the band


def test_make_dataset_validation():
    spec = ShapeSpec("washer", n_points=512)
    cfg = DefectConfig(mode="add")
    with pytest.raises(ValueError):
        make_dataset([], 1, 1, 1, cfg, seed=0)
    with pytest.raises(ValueError):
        make_dataset([spec], 0, 1, 1, cfg, seed=0)
    with pytest.raises(ValueError):
        make_dataset([spec], 1, 1, 1, cfg, seed=0, strength_range=(0.0, 0.5))
    with pytest.raises(ValueError):
        make_dataset([spec], 1, 1, 1, cfg, seed=0, strength_range=(0.6, 0.5))
