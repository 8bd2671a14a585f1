"""Command-line front end.

Subcommands operate on a shared output directory (``--out``, default
``pcad_out``)::

    pcad make-dataset [--config cfg.json] [--seed N] [--out DIR] [--scale F]
    pcad train        [--config cfg.json] [--seed N] [--out DIR]
                      [--manifest PATH] [--no-sdo] [--no-spcg]
    pcad score        --cloud PATH --apprentice PATH [--expert PATH] ...
    pcad evaluate     [--manifest PATH] [--checkpoints DIR] [--heatmaps] ...
    pcad inject       --cloud PATH [--mode M] [--strength F] ...

Exit codes: 0 success, 2 bad configuration or arguments, 3 I/O or format
failure, 4 training divergence, 5 checkpoint/cloud mismatch, 6 a metric was
requested on single-class data. ``PCAD_THREADS`` caps evaluation workers.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .cloud import CloudFormatError, DatasetSplit, load_cloud, save_cloud
from .config import (
    ConfigError,
    dataset_spec,
    defect_config,
    encoder_dims,
    eval_config,
    load_config,
    train_config,
)
from .defects import MODES, generate
from .encoder import init_params, load_params, params_checksum, save_params
from .metrics import UndefinedMetricError, combine_results, evaluate, score_clouds
from .shapes import make_dataset
from .training import TrainingDivergedError, anomaly_scores, train

logger = logging.getLogger(__name__)

__all__ = ["main", "CheckpointMismatchError"]

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_SINGLE_CLASS = 6


class CheckpointMismatchError(RuntimeError):
    """An encoder checkpoint cannot be applied to the given cloud or peer."""


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _seed_from(seq: np.random.SeedSequence) -> int:
    words = seq.generate_state(2)
    return (int(words[0]) << 32) | int(words[1])


def _category_seeds(seed: int, categories: list[str]) -> dict[str, int]:
    """One independent child seed per category, keyed in sorted order."""
    ordered = sorted(categories)
    children = np.random.SeedSequence(seed).spawn(len(ordered))
    return {cat: _seed_from(child) for cat, child in zip(ordered, children)}


def _scaled(count: int, scale: float) -> int:
    return max(1, int(round(count * scale)))


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_manifest(path: str) -> tuple[dict, str]:
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("categories", "clouds"):
        if key not in manifest:
            raise ConfigError(f"manifest {path} is missing the {key!r} entry")
    return manifest, os.path.dirname(os.path.abspath(path))


def _manifest_clouds(manifest: dict, base: str, category: str, split: str):
    rows = [
        row
        for row in manifest["clouds"]
        if row["category"] == category and row["split"] == split
    ]
    return [load_cloud(os.path.join(base, row["path"])) for row in rows]


def _load_checkpoint(path: str):
    # a missing file is an I/O failure (exit 3); a file that exists but does
    # not parse as a checkpoint is a checkpoint problem (exit 5)
    try:
        params, extra = load_params(path, return_extra=True)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointMismatchError(f"{path}: unreadable checkpoint ({exc})") from exc
    return params, (extra or {})


def _checkpoint_k(extra: dict, fallback: int) -> int:
    k = extra.get("k", fallback)
    if not isinstance(k, int) or k < 1:
        raise CheckpointMismatchError(f"checkpoint carries an invalid k: {k!r}")
    return k


def _require_compatible(expert, apprentice) -> None:
    if expert.dims != apprentice.dims:
        raise CheckpointMismatchError(
            f"encoder width mismatch: expert {expert.dims} vs apprentice {apprentice.dims}"
        )
    if not expert.frozen:
        raise CheckpointMismatchError("the expert checkpoint must be frozen")


def _cloud_stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# make-dataset
# ---------------------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    if args.scale <= 0.0:
        raise ConfigError("--scale must be positive")
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    block = cfg["dataset"]
    categories = sorted(block["categories"])
    n_train = _scaled(block["n_train"], args.scale)
    n_test_normal = _scaled(block["n_test_normal"], args.scale)
    n_test_abnormal = _scaled(block["n_test_abnormal"], args.scale)
    dcfg = defect_config(cfg)
    strength_range = tuple(block["strength_range"])

    root = os.path.join(args.out, "dataset")
    os.makedirs(root, exist_ok=True)
    seeds = _category_seeds(seed, categories)

    rows = []
    for cat in categories:
        split = make_dataset(
            [dataset_spec(cfg, cat)],
            n_train,
            n_test_normal,
            n_test_abnormal,
            dcfg,
            seed=seeds[cat],
            strength_range=strength_range,
        )
        groups = (
            ("train", split.train_normal),
            ("test_normal", split.test_normal),
            ("test_abnormal", split.test_abnormal),
        )
        for split_name, clouds in groups:
            folder = os.path.join(root, cat, split_name)
            os.makedirs(folder, exist_ok=True)
            for i, cloud in enumerate(clouds):
                rel = os.path.join(cat, split_name, f"cloud_{i:04d}.ply")
                save_cloud(cloud, os.path.join(root, rel))
                rows.append(
                    {
                        "category": cat,
                        "split": split_name,
                        "path": rel,
                        "has_labels": cloud.labels is not None,
                    }
                )
        flagged = sum(int(c.labels.sum()) for c in split.test_abnormal)
        total = sum(len(c) for c in split.test_abnormal)
        print(
            f"{cat}: {n_train} train / {n_test_normal} normal / "
            f"{n_test_abnormal} abnormal clouds "
            f"({flagged / total:.4f} of abnormal points flagged)"
        )

    rows.sort(key=lambda r: (r["category"], r["split"], r["path"]))
    manifest = {
        "categories": categories,
        "clouds": rows,
        "counts": {
            "train": n_train,
            "test_normal": n_test_normal,
            "test_abnormal": n_test_abnormal,
        },
        "n_points": block["n_points"],
        "scale": args.scale,
        "seed": seed,
    }
    _write_json(manifest, os.path.join(root, "manifest.json"))
    print(f"wrote {len(rows)} clouds under {root}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    manifest_path = args.manifest or os.path.join(args.out, "dataset", "manifest.json")
    manifest, base = _read_manifest(manifest_path)
    categories = sorted(manifest["categories"])

    ckpt_dir = os.path.join(args.out, "checkpoints")
    log_dir = os.path.join(args.out, "logs")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(log_dir, exist_ok=True)

    dims = encoder_dims(cfg)
    expert_path = os.path.join(ckpt_dir, "expert.json")
    if os.path.exists(expert_path):
        expert, extra = _load_checkpoint(expert_path)
        if not expert.frozen:
            raise CheckpointMismatchError(f"{expert_path} is not a frozen expert")
        k = _checkpoint_k(extra, cfg["encoder"]["k"])
    else:
        expert = init_params(dims, seed=seed, frozen=True)
        k = cfg["encoder"]["k"]
        save_params(expert, expert_path, extra={"k": k, "role": "expert"})
        print(f"initialized expert {params_checksum(expert)[:12]} -> {expert_path}")

    seeds = _category_seeds(seed, categories)
    for cat in categories:
        clouds = _manifest_clouds(manifest, base, cat, "train")
        if not clouds:
            raise ConfigError(f"manifest has no train clouds for category {cat!r}")
        if any(len(c) < k for c in clouds):
            raise CheckpointMismatchError(
                f"category {cat!r} has a training cloud smaller than k={k}"
            )
        tcfg = train_config(
            cfg,
            seed=seeds[cat],
            distill_only=args.no_sdo,
            random_regions=args.no_spcg,
        )
        tcfg = dataclasses.replace(tcfg, k=k)
        apprentice, history = train(clouds, tcfg, expert)
        save_params(
            apprentice,
            os.path.join(ckpt_dir, f"{cat}_apprentice.json"),
            extra={
                "k": k,
                "role": "apprentice",
                "category": cat,
                "distill_only": args.no_sdo,
                "random_regions": args.no_spcg,
            },
        )
        csv_path = os.path.join(log_dir, f"{cat}_loss.csv")
        with open(csv_path, "w") as f:
            f.write("step,loss,mean_d_n,mean_d_s\n")
            for row in history:
                f.write(
                    f"{row['step']},{row['loss']:.9g},"
                    f"{row['mean_d_n']:.9g},{row['mean_d_s']:.9g}\n"
                )
        print(
            f"{cat}: {len(history)} steps, final loss {history[-1]['loss']:.6f} "
            f"-> {cat}_apprentice.json"
        )
    return 0


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def cmd_score(args) -> int:
    cfg = load_config(args.config)
    expert_path = args.expert or os.path.join(args.out, "checkpoints", "expert.json")
    expert, expert_extra = _load_checkpoint(expert_path)
    apprentice, app_extra = _load_checkpoint(args.apprentice)
    _require_compatible(expert, apprentice)
    k = _checkpoint_k(app_extra, _checkpoint_k(expert_extra, cfg["encoder"]["k"]))

    cloud = load_cloud(args.cloud)
    if len(cloud) < k:
        raise CheckpointMismatchError(
            f"cloud has {len(cloud)} points but the encoder needs k={k} neighbors"
        )
    ecfg = eval_config(cfg)
    report = anomaly_scores(
        cloud,
        expert,
        apprentice,
        k,
        aggregate=ecfg.aggregate,
        top_fraction=ecfg.top_fraction,
        cloud_id=_cloud_stem(args.cloud),
    )

    out_dir = os.path.join(args.out, "scores")
    os.makedirs(out_dir, exist_ok=True)
    stem = _cloud_stem(args.cloud)
    save_cloud(
        cloud.replace(scores=report.point_scores),
        os.path.join(out_dir, f"{stem}_scored.ply"),
    )
    summary = {
        "cloud": stem,
        "n_points": len(cloud),
        "object_score": report.object_score,
        "max": float(report.point_scores.max()),
        "mean": float(report.point_scores.mean()),
        "p99": float(np.percentile(report.point_scores, 99)),
        "aggregate": report.aggregate,
    }
    _write_json(summary, os.path.join(out_dir, f"{stem}_summary.json"))
    print(f"{stem}: object score {report.object_score:.6f} -> {stem}_scored.ply")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    manifest_path = args.manifest or os.path.join(args.out, "dataset", "manifest.json")
    manifest, base = _read_manifest(manifest_path)
    categories = sorted(manifest["categories"])
    ckpt_dir = args.checkpoints or os.path.join(args.out, "checkpoints")

    expert, expert_extra = _load_checkpoint(os.path.join(ckpt_dir, "expert.json"))
    ecfg_base = eval_config(cfg)

    results = []
    for cat in categories:
        apprentice, app_extra = _load_checkpoint(
            os.path.join(ckpt_dir, f"{cat}_apprentice.json")
        )
        _require_compatible(expert, apprentice)
        k = _checkpoint_k(app_extra, _checkpoint_k(expert_extra, ecfg_base.k))
        normal = _manifest_clouds(manifest, base, cat, "test_normal")
        abnormal = _manifest_clouds(manifest, base, cat, "test_abnormal")
        if not normal or not abnormal:
            raise UndefinedMetricError(
                f"category {cat!r} lacks one test class "
                f"({len(normal)} normal / {len(abnormal)} abnormal clouds)"
            )
        split = DatasetSplit(
            train_normal=[],
            test_normal=normal,
            test_abnormal=abnormal,
            anomaly_rate=len(abnormal) / (len(normal) + len(abnormal)),
        )
        ecfg = dataclasses.replace(ecfg_base, k=k)
        results.append(evaluate(split, expert, apprentice, ecfg, category=cat))
        if args.heatmaps:
            heat_dir = os.path.join(args.out, "eval", "heatmaps")
            os.makedirs(heat_dir, exist_ok=True)
            reports = score_clouds(abnormal, expert, apprentice, ecfg)
            for i, (cloud, report) in enumerate(zip(abnormal, reports)):
                save_cloud(
                    cloud.replace(scores=report.point_scores),
                    os.path.join(heat_dir, f"{cat}_{i:04d}.ply"),
                )

    combined = combine_results(results)
    out_dir = os.path.join(args.out, "eval")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(combined.to_json_dict(), os.path.join(out_dir, "results.json"))
    with open(os.path.join(out_dir, "results.csv"), "w") as f:
        f.write(combined.to_csv_text())

    header = f"{'category':<12} {'obj auroc':>9} {'obj aupr':>9} {'pt auroc':>9} {'pt aupr':>9}"
    print(header)
    for cat in sorted(combined.per_category):
        m = combined.per_category[cat]
        print(
            f"{cat:<12} {m['object_auroc']:>9.4f} {m['object_aupr']:>9.4f} "
            f"{m['point_auroc']:>9.4f} {m['point_aupr']:>9.4f}"
        )
    m = combined.mean
    print(
        f"{'mean':<12} {m['object_auroc']:>9.4f} {m['object_aupr']:>9.4f} "
        f"{m['point_auroc']:>9.4f} {m['point_aupr']:>9.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# inject
# ---------------------------------------------------------------------------

def cmd_inject(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    dcfg = defect_config(cfg)
    mode = args.mode or dcfg.mode
    strength = args.strength if args.strength is not None else dcfg.strength

    cloud = load_cloud(args.cloud)
    sample = generate(cloud, strength, mode, dcfg, seed=seed)

    out_dir = os.path.join(args.out, "injected")
    os.makedirs(out_dir, exist_ok=True)
    stem = _cloud_stem(args.cloud)
    save_cloud(
        sample.perturbed.replace(labels=sample.supervision),
        os.path.join(out_dir, f"{stem}_injected.ply"),
    )
    sidecar = {
        "source": os.path.abspath(args.cloud),
        "mode": sample.mode,
        "strength": sample.strength,
        "seed": sample.seed,
        "region_id": sample.region_id,
        "n_points_in": len(cloud),
        "n_points_out": len(sample.perturbed),
        "n_flagged": int(sample.supervision.sum()),
        "n_removed": 0 if sample.removed_indices is None else len(sample.removed_indices),
    }
    _write_json(sidecar, os.path.join(out_dir, f"{stem}_injected.json"))
    print(
        f"{stem}: {sample.mode} defect, {len(cloud)} -> {len(sample.perturbed)} points, "
        f"{sidecar['n_flagged']} flagged"
    )
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON run config (defaults built in)")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default="pcad_out", help="output directory root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcad",
        description="Point-cloud anomaly detection: synthesize defects, train "
        "expert/apprentice encoders, score and evaluate clouds.",
        epilog="Set PCAD_THREADS to cap evaluation worker threads.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("make-dataset", help="generate a labeled shape corpus")
    _add_common(p)
    p.add_argument("--scale", type=float, default=1.0, help="scale the split sizes")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="fit per-category apprentice encoders")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest path")
    p.add_argument("--no-sdo", action="store_true",
                   help="ablation: plain distillation, no discrepancy weighting")
    p.add_argument("--no-spcg", action="store_true",
                   help="ablation: random defect regions instead of guided ones")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score one cloud with a trained pair")
    _add_common(p)
    p.add_argument("--cloud", required=True, help="input .xyz/.ply cloud")
    p.add_argument("--apprentice", required=True, help="apprentice checkpoint")
    p.add_argument("--expert", default=None, help="expert checkpoint")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="run the detection benchmark")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="dataset manifest path")
    p.add_argument("--checkpoints", default=None, help="checkpoint directory")
    p.add_argument("--heatmaps", action="store_true",
                   help="also write per-point score heatmap clouds")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inject", help="inject a synthetic defect into a cloud")
    _add_common(p)
    p.add_argument("--cloud", required=True, help="input .xyz/.ply cloud")
    p.add_argument("--mode", choices=MODES, default=None, help="defect mode")
    p.add_argument("--strength", type=float, default=None,
                   help="defect budget as a fraction of the cloud size")
    p.set_defaults(func=cmd_inject)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CloudFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGLE_CLASS


if __name__ == "__main__":
    sys.exit(main())
