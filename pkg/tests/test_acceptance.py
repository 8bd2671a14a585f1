"""Acceptance gate for the toolkit.

Each test checks one release criterion and prints a single verdict line
(``[PASS]``/``[FAIL]`` plus the measured numbers) straight to the terminal.
The detection benchmark runs the shipped CLI in subprocesses exactly as a
user would, once per session, and its artifacts feed the quality, ablation,
and freeze criteria.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from pcad.cloud import PointCloud
from pcad.defects import DefectConfig, generate, prepare_source
from pcad.encoder import (
    encode,
    encode_backward,
    encode_features,
    init_params,
    local_descriptors,
    params_checksum,
)
from pcad.geometry import denoise_statistical, estimate_normals_curvature
from pcad.metrics import aupr, auroc
from pcad.shapes import ShapeSpec, make_shape
from pcad.spatial import SpatialIndex, octree_downsample
from pcad.training import (
    DiscrepancyBatch,
    TrainConfig,
    _feature_grad,
    discrepancy_loss,
    focal_weights,
    loss_distance_grads,
    point_distances,
    split_by_mask,
    train,
)


def _verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# benchmark run (shared by the quality, ablation, and freeze criteria)
# ---------------------------------------------------------------------------

BENCH_SEED = 42
BENCH_CONFIG = {
    "dataset": {"n_train": 20, "n_test_normal": 10, "n_test_abnormal": 10},
    "defects": {"mode": "add"},
}


def _cli(args, check=True):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pcad.cli", *args],
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - start
    if check and proc.returncode != 0:
        raise AssertionError(
            f"pcad {' '.join(args)} exited {proc.returncode}:\n{proc.stderr}"
        )
    return elapsed


def _mean_metrics(out_dir):
    with open(os.path.join(out_dir, "eval", "results.json")) as f:
        return json.load(f)["mean"]


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    cfg_path = str(root / "cfg.json")
    with open(cfg_path, "w") as f:
        json.dump(BENCH_CONFIG, f)

    full = str(root / "full")
    base = ["--config", cfg_path, "--seed", str(BENCH_SEED)]
    wall = _cli(["make-dataset", *base, "--out", full])
    wall += _cli(["train", *base, "--out", full])
    wall += _cli(["evaluate", *base, "--out", full])

    manifest = os.path.join(full, "dataset", "manifest.json")
    arms = {}
    for flag in ("--no-sdo", "--no-spcg"):
        out = str(root / flag.lstrip("-"))
        _cli(["train", *base, "--manifest", manifest, "--out", out, flag])
        _cli(
            [
                "evaluate",
                *base,
                "--manifest",
                manifest,
                "--checkpoints",
                os.path.join(out, "checkpoints"),
                "--out",
                out,
            ]
        )
        arms[flag] = _mean_metrics(out)

    return {
        "wall": wall,
        "full": _mean_metrics(full),
        "arms": arms,
        "expert_paths": [
            os.path.join(full, "checkpoints", "expert.json"),
            os.path.join(str(root / "no-sdo"), "checkpoints", "expert.json"),
            os.path.join(str(root / "no-spcg"), "checkpoints", "expert.json"),
        ],
    }


# ---------------------------------------------------------------------------
# criterion 1: ranking metrics agree with brute-force oracles
# ---------------------------------------------------------------------------

def _auroc_pairwise(scores, labels):
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return wins / (pos.size * neg.size)


def _aupr_thresholds(scores, labels):
    n_pos = int((labels == 1).sum())
    area, prev_recall = 0.0, 0.0
    for t in np.unique(scores)[::-1]:
        kept = scores >= t
        tp = int((labels[kept] == 1).sum())
        precision = tp / int(kept.sum())
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def test_metric_implementations_match_oracles(capsys):
    rng = np.random.default_rng(20240817)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1  # keep both classes present
        rng.shuffle(labels)
        if trial % 2:
            scores = rng.integers(0, 8, n).astype(np.float64)
        else:
            scores = rng.normal(size=n)
        worst = max(
            worst,
            abs(auroc(scores, labels) - _auroc_pairwise(scores, labels)),
            abs(aupr(scores, labels) - _aupr_thresholds(scores, labels)),
        )
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10.0
    _verdict(
        capsys,
        "metric oracle agreement",
        ok,
        f"max |delta| {worst:.2e} over 1000 instances in {elapsed:.1f}s "
        "(bounds 1e-9, 10s)",
    )


# ---------------------------------------------------------------------------
# criterion 2: analytic gradients of the full scoring chain
# ---------------------------------------------------------------------------

_FD_K, _FD_N, _FD_DIMS, _FD_H, _FD_ALPHA = 8, 64, (3, 8, 8), 1e-4, 0.5


def _fd_instance(i):
    rng = np.random.default_rng(5000 + i)
    cloud = PointCloud(points=rng.uniform(-5.0, 5.0, (_FD_N, 3)))
    expert = init_params(_FD_DIMS, seed=1000 + i, frozen=True)
    app = init_params(_FD_DIMS, seed=2000 + i)
    app.biases = [rng.uniform(-0.3, 0.3, b.shape) for b in app.biases]
    mask = rng.integers(0, 2, _FD_N)
    mask[0], mask[1] = 0, 1
    return cloud, expert, app, mask


def _fd_margin(cloud, app):
    """Smallest distance from any live forward quantity to a kink.

    Central differences only measure a derivative where the chain is smooth
    across the probe window, so instances are screened on the pool winners'
    pre-activations, the pooling margin, and near-zero dead groups.
    """
    desc = local_descriptors(cloud.points, _FD_K)
    _, cache = encode_features(desc, app, return_cache=True)
    z = cache["pre_acts"][-1].reshape(_FD_N, _FD_K, -1)
    act = np.maximum(z, 0.0)
    z_live = np.take_along_axis(z, cache["arg"][:, None, :], axis=1)[:, 0, :]
    ordered = np.sort(act, axis=1)
    top1, top2 = ordered[:, -1, :], ordered[:, -2, :]
    alive = top1 > 0.0
    margin = np.inf
    if alive.any():
        margin = min(margin, np.abs(z_live[alive]).min(), (top1 - top2)[alive].min())
    if (~alive).any():
        margin = min(margin, (-z.max(axis=1)[~alive]).min())
    return margin


def _chain_loss(cloud, f_expert, app, mask, w_normal, w_synth):
    f_app = encode(cloud, app, _FD_K)
    d_normal, d_synth = split_by_mask(point_distances(f_app, f_expert), mask)
    return discrepancy_loss(
        DiscrepancyBatch(d_normal, d_synth, w_normal, w_synth, _FD_ALPHA)
    )


def _fd_check(cloud, expert, app, mask):
    f_expert = encode(cloud, expert, _FD_K)
    f_app = encode(cloud, app, _FD_K)
    d_normal, d_synth = split_by_mask(point_distances(f_app, f_expert), mask)
    w_normal = focal_weights(d_normal, _FD_ALPHA, "normal")
    w_synth = focal_weights(d_synth, _FD_ALPHA, "synth")
    batch = DiscrepancyBatch(d_normal, d_synth, w_normal, w_synth, _FD_ALPHA)
    g_normal, g_synth = loss_distance_grads(batch)
    upstream = _feature_grad(f_app.features, f_expert.features, mask, g_normal, g_synth)
    weight_grads, bias_grads = encode_backward(cloud, app, _FD_K, upstream)

    scale = max(
        max(np.abs(g).max() for g in weight_grads),
        max(np.abs(g).max() for g in bias_grads),
    )
    worst = 0.0
    for attr, grads in (("weights", weight_grads), ("biases", bias_grads)):
        for tensor, grad in zip(getattr(app, attr), grads):
            it = np.nditer(tensor, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = tensor[idx]
                tensor[idx] = orig + _FD_H
                up = _chain_loss(cloud, f_expert, app, mask, w_normal, w_synth)
                tensor[idx] = orig - _FD_H
                down = _chain_loss(cloud, f_expert, app, mask, w_normal, w_synth)
                tensor[idx] = orig
                worst = max(worst, abs(grad[idx] - (up - down) / (2 * _FD_H)))
    return worst / max(scale, 1e-12)


def test_scoring_chain_gradient_matches_finite_differences(capsys):
    start = time.perf_counter()
    errors, candidate = [], 0
    while len(errors) < 20:
        instance = _fd_instance(candidate)
        candidate += 1
        assert candidate < 2000, "instance screening failed to converge"
        cloud, expert, app, mask = instance
        d_min = point_distances(
            encode(cloud, app, _FD_K), encode(cloud, expert, _FD_K)
        ).min()
        if _fd_margin(cloud, app) <= 1e-3 or d_min <= 1e-3:
            continue
        errors.append(_fd_check(cloud, expert, app, mask))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 30.0
    _verdict(
        capsys,
        "scoring-chain gradients",
        ok,
        f"max relative error {max(errors):.2e} on 20 instances "
        f"({candidate} screened) in {elapsed:.1f}s (bounds 1e-4, 30s)",
    )


# ---------------------------------------------------------------------------
# criterion 3: defect budget, locality, and per-seed determinism
# ---------------------------------------------------------------------------

def test_defect_budget_locality_determinism(capsys, washer_analyzed):
    cfg = DefectConfig()
    prepared = prepare_source(washer_analyzed, cfg)
    n = len(washer_analyzed)
    budget_ok = locality_ok = deterministic = True
    lo, hi = 0.008, 0.0228
    for s in range(200):
        strength = lo + (hi - lo) * s / 199.0
        budget = int(n * strength)
        sample = generate(
            washer_analyzed, strength, "random", cfg, seed=s, prepared=prepared
        )
        delta = len(sample.perturbed) - n
        expected = budget if sample.mode == "add" else -budget
        budget_ok &= delta == expected
        budget_ok &= int(sample.mask.sum()) == (budget if sample.mode == "add" else 0)
        if sample.mode == "add":
            region = washer_analyzed.points[prepared.clusters[sample.region_id]]
            centroid = region.mean(axis=0)
            reach = np.linalg.norm(
                sample.perturbed.points[sample.mask.astype(bool)] - centroid, axis=1
            ).max()
            cap = 2.0 * np.linalg.norm(region - centroid, axis=1).max()
            locality_ok &= reach <= cap + 1e-9
        if s % 20 == 0:
            again = generate(
                washer_analyzed, strength, "random", cfg, seed=s, prepared=prepared
            )
            deterministic &= (
                again.perturbed.points.tobytes() == sample.perturbed.points.tobytes()
                and np.array_equal(again.mask, sample.mask)
                and np.array_equal(again.supervision, sample.supervision)
                and np.array_equal(again.removed_indices, sample.removed_indices)
                and again.mode == sample.mode
                and again.region_id == sample.region_id
            )
    ok = budget_ok and locality_ok and deterministic
    _verdict(
        capsys,
        "defect budget/locality/determinism",
        ok,
        f"200 seeded injections: budget exact {budget_ok}, "
        f"reach within 2x region radius {locality_ok}, "
        f"byte-stable replays {deterministic}",
    )


# ---------------------------------------------------------------------------
# criterion 4: discrepancy weighting identities
# ---------------------------------------------------------------------------

def test_weighting_identities(capsys):
    rng = np.random.default_rng(11)
    d = rng.uniform(0.1, 2.0, 64)
    alpha_zero = np.array_equal(focal_weights(d, 0.0, "normal"), np.ones(64))
    equal = np.array_equal(focal_weights(np.full(64, 1.3), 2.0, "synth"), np.ones(64))

    batch = DiscrepancyBatch.from_distances(d, rng.integers(0, 2, 64), alpha=0.7)
    scaled = DiscrepancyBatch(
        batch.d_normal,
        batch.d_synth,
        batch.w_normal * 1e6,
        batch.w_synth * 1e6,
        batch.alpha,
    )
    invariant = abs(discrepancy_loss(batch) - discrepancy_loss(scaled)) < 1e-12

    hand = DiscrepancyBatch(
        d_normal=np.array([0.0, 0.0]),
        d_synth=np.array([1.0]),
        w_normal=focal_weights(np.array([0.0, 0.0]), 0.0, "normal"),
        w_synth=focal_weights(np.array([1.0]), 0.0, "synth"),
        alpha=0.0,
    )
    hand_ok = discrepancy_loss(hand) == -1.0 / 3.0

    ok = alpha_zero and equal and invariant and hand_ok
    _verdict(
        capsys,
        "weighting identities",
        ok,
        f"alpha=0 ones {alpha_zero}, equal-distance ones {equal}, "
        f"scale invariance {invariant}, hand case -1/3 {hand_ok}",
    )


# ---------------------------------------------------------------------------
# criteria 5 and 6: benchmark quality and ablation direction
# ---------------------------------------------------------------------------

def test_benchmark_detection_quality(capsys, benchmark):
    obj = benchmark["full"]["object_auroc"]
    pt = benchmark["full"]["point_auroc"]
    wall = benchmark["wall"]
    ok = obj >= 0.90 and pt >= 0.75 and wall < 300.0
    _verdict(
        capsys,
        "benchmark quality",
        ok,
        f"object AUROC {obj:.4f} (>=0.90), point AUROC {pt:.4f} (>=0.75), "
        f"wall {wall:.0f}s (<300s)",
    )


def test_ablations_score_below_full_method(capsys, benchmark):
    full_pt = benchmark["full"]["point_auroc"]
    sdo = benchmark["arms"]["--no-sdo"]["point_auroc"]
    spcg = benchmark["arms"]["--no-spcg"]["point_auroc"]
    ok = sdo < full_pt and spcg < full_pt
    _verdict(
        capsys,
        "ablation direction",
        ok,
        f"point AUROC full {full_pt:.4f} vs --no-sdo {sdo:.4f} "
        f"and --no-spcg {spcg:.4f} (both strictly lower)",
    )


# ---------------------------------------------------------------------------
# criterion 7: geometry primitives
# ---------------------------------------------------------------------------

def test_geometry_primitives(capsys):
    rng = np.random.default_rng(7)

    pts = rng.uniform(-10.0, 10.0, (300, 3))
    index = SpatialIndex(pts)
    knn_ok = True
    for qi in rng.integers(0, 300, 40):
        d2 = ((pts - pts[qi]) ** 2).sum(axis=1)
        expected = np.lexsort((np.arange(300), d2))[:10]
        knn_ok &= np.array_equal(index.knn(pts[qi], 10), expected)

    gx, gy = np.meshgrid(np.linspace(0, 10, 20), np.linspace(0, 10, 20))
    plane = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(400)])
    flat = estimate_normals_curvature(PointCloud(points=plane), k=12)
    max_curv = float(flat.curvatures.max())
    plane_ok = max_curv < 1e-3

    outliers = np.column_stack(
        [rng.uniform(0, 10, 20), rng.uniform(0, 10, 20), 300.0 + 10.0 * np.arange(20)]
    )
    noisy = PointCloud(points=np.vstack([plane, outliers]))
    _, removed = denoise_statistical(noisy, k=8, std_ratio=2.0)
    outliers_removed = int((removed >= 400).sum())
    inliers_kept = 400 - int((removed < 400).sum())
    denoise_ok = outliers_removed >= 19 and inliers_kept >= 396

    cloud = PointCloud(points=rng.uniform(-8.0, 8.0, (500, 3)))
    once = octree_downsample(cloud, 1.0)
    twice = octree_downsample(once, 1.0)
    octree_ok = once.points.tobytes() == twice.points.tobytes()

    ok = knn_ok and plane_ok and denoise_ok and octree_ok
    _verdict(
        capsys,
        "geometry primitives",
        ok,
        f"knn exact {knn_ok}, plane curvature {max_curv:.1e} (<1e-3), "
        f"outliers removed {outliers_removed}/20 with {inliers_kept}/400 inliers kept, "
        f"downsample idempotent {octree_ok}",
    )


# ---------------------------------------------------------------------------
# criterion 8: the expert never changes
# ---------------------------------------------------------------------------

def test_expert_parameters_never_change(capsys, benchmark):
    clouds = [
        make_shape(ShapeSpec("washer", n_points=600, noise_sigma=0.02, seed=s))
        for s in (1, 2)
    ]
    expert = init_params((3, 8, 6), seed=5, frozen=True)
    before = params_checksum(expert)
    train(
        clouds,
        TrainConfig(epochs=1, learning_rate=1e-3, alpha=0.01, seed=0, k=8,
                    defects=DefectConfig(), mode="random"),
        expert,
    )
    in_process = params_checksum(expert) == before

    blobs = {open(p, "rb").read() for p in benchmark["expert_paths"]}
    across_runs = len(blobs) == 1

    ok = in_process and across_runs
    _verdict(
        capsys,
        "expert freeze",
        ok,
        f"checksum stable through training {in_process}, "
        f"identical expert checkpoint across all benchmark runs {across_runs}",
    )
