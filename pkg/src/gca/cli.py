"""Experiment harness: `gca <subcommand>`.

Every run writes a report.json (resolved config, config hash, wall clock,
degenerate frame count, pass flag) plus its own artifacts into --out. Exit
codes: 0 on pass, 1 when a check fails, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import apply_rotation, farthest_point_sampling
from .lrf import (
    REPEATABILITY_METHODS,
    build_lrfs,
    repeatability_experiment,
    write_histogram_csv,
    write_repeatability_metadata,
)
from .anchors import anchor_sets_batch
from .network import GcaNetwork, network_forward, full_scale_config, toy_network_config
from .pcio import (
    CloudParseError,
    RotationMode,
    ShapeKind,
    generate_bumpy_cloud,
    generate_shape,
    load_cloud,
    make_toy_dataset,
    sample_rotation,
    save_cloud,
    save_manifest,
    DatasetManifest,
    ManifestEntry,
)
from .train import TrainConfig, evaluate, gradient_relative_errors, train

_ARCHES = {"toy": toy_network_config, "full": full_scale_config}


@dataclass
class RunReport:
    experiment: str
    config: dict
    metrics: dict = field(default_factory=dict)
    passed: bool = True
    wall_clock_s: float = 0.0
    degenerate_lrf_count: int = 0

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.config, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "experiment": self.experiment,
            "config": self.config,
            "config_hash": self.config_hash,
            "metrics": self.metrics,
            "passed": self.passed,
            "wall_clock_s": self.wall_clock_s,
            "degenerate_lrf_count": self.degenerate_lrf_count,
        }
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
        (out_dir / "config.json").write_text(json.dumps(self.config, indent=2) + "\n")


def _resolve(defaults: dict, file_config: dict, args: argparse.Namespace) -> dict:
    """Defaults, overridden by --config file values, overridden by CLI flags."""
    resolved = dict(defaults)
    for key, value in file_config.items():
        if key not in defaults:
            raise KeyError(f"unknown config key {key!r}")
        resolved[key] = value
    for key in defaults:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
    return resolved


def _threads(resolved_threads) -> int:
    if resolved_threads:
        return int(resolved_threads)
    env = os.environ.get("GCA_THREADS")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_shapes(args, file_config) -> RunReport:
    defaults = dict(
        seed=0,
        threads=None,
        train_per_class=100,
        test_per_class=40,
        points=256,
        jitter=0.01,
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    out = Path(args.out)
    rng = np.random.default_rng(cfg["seed"])
    classes = [k.value for k in ShapeKind]
    counts = {"train": cfg["train_per_class"], "test": cfg["test_per_class"]}
    written = 0
    for split, per_class in counts.items():
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for kind in ShapeKind:
            label = classes.index(kind.value)
            for i in range(per_class):
                child = int(rng.integers(0, 2**62))
                cloud = generate_shape(kind, cfg["points"], cfg["jitter"], child)
                rel = f"{kind.value}_{i:04d}.xyz"
                save_cloud(cloud, split_dir / rel)
                entries.append(ManifestEntry(rel, label))
                written += 1
        save_manifest(
            DatasetManifest(cfg["seed"], classes, entries),
            split_dir / "manifest.json",
        )
    return RunReport(
        "gen-shapes",
        cfg,
        metrics={"files_written": written, "classes": classes},
    )


def cmd_extract(args, file_config) -> RunReport:
    defaults = dict(
        seed=0,
        threads=None,
        input=None,
        shape=None,
        points=256,
        jitter=0.01,
        keypoints=32,
        anchor_count=8,
        weighted=True,
        use_o_vector=True,
        dump_anchors=False,
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    if (cfg["input"] is None) == (cfg["shape"] is None):
        raise UsageError("pass exactly one of --input or --shape")
    if cfg["input"] is not None:
        cloud = load_cloud(cfg["input"])
    else:
        cloud = generate_shape(
            ShapeKind(cfg["shape"]), cfg["points"], cfg["jitter"], cfg["seed"]
        )
    pts = cloud.points
    kp_idx = farthest_point_sampling(pts, min(cfg["keypoints"], len(pts)))
    q = pts[kp_idx]
    axes, degen, fallback = build_lrfs(
        q, q, weighted=cfg["weighted"], use_o_vector=cfg["use_o_vector"]
    )
    axes = axes.copy()
    axes[degen] = np.eye(3)
    local = np.matmul(pts[None, :, :] - q[:, None, :], axes)
    anchors, occupancy = anchor_sets_batch(local, cfg["anchor_count"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "keypoints.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keypoint", "point_index", "x", "y", "z"])
        for i, (idx, p) in enumerate(zip(kp_idx, q)):
            writer.writerow([i, int(idx), *(repr(float(v)) for v in p)])
    with open(out / "frames.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["keypoint"]
            + [f"e{i}_{c}" for i in (1, 2, 3) for c in "xyz"]
            + ["degenerate", "o_fallback"]
        )
        for i in range(len(q)):
            row = [i]
            for col in range(3):
                row.extend(repr(float(v)) for v in axes[i, :, col])
            row.extend([int(degen[i]), int(fallback[i])])
            writer.writerow(row)
    if cfg["dump_anchors"]:
        with open(out / "anchors.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["keypoint", "bin", "ax", "ay", "az", "occupancy"])
            for i in range(len(q)):
                for b in range(cfg["anchor_count"]):
                    writer.writerow(
                        [i, b, *(repr(float(v)) for v in anchors[i, b]), int(occupancy[i, b])]
                    )
    return RunReport(
        "extract",
        cfg,
        metrics={
            "n_points": len(pts),
            "n_keypoints": len(q),
            "o_fallback_count": int(fallback.sum()),
        },
        degenerate_lrf_count=int(degen.sum()),
    )


def cmd_invariance_check(args, file_config) -> RunReport:
    defaults = dict(
        seed=0, threads=None, trials=100, points=256, arch="toy", tolerance=1e-6
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    net = GcaNetwork(_ARCHES[cfg["arch"]](), seed=cfg["seed"])
    rng = np.random.default_rng((cfg["seed"], 17))
    diffs = []
    degenerate = 0
    for _ in range(cfg["trials"]):
        pts = rng.normal(size=(cfg["points"], 3))
        rot = sample_rotation(RotationMode.SO3, rng)
        logits_a, act_a = network_forward(net, pts)
        logits_b, act_b = network_forward(net, apply_rotation(pts, rot))
        diffs.append(float(np.abs(logits_a - logits_b).max()))
        degenerate += act_a.degenerate_count + act_b.degenerate_count
    max_diff = max(diffs)
    passed = max_diff <= cfg["tolerance"] and degenerate == 0
    return RunReport(
        "invariance-check",
        cfg,
        metrics={"max_logit_diff": max_diff, "trials": cfg["trials"]},
        passed=passed,
        degenerate_lrf_count=degenerate,
    )


def cmd_grad_check(args, file_config) -> RunReport:
    defaults = dict(seed=0, threads=None, instances=3, tolerance=1e-4)
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    worst = 0.0
    per_instance = []
    for i in range(cfg["instances"]):
        net = GcaNetwork(_grad_check_config(), seed=cfg["seed"] + i)
        rng = np.random.default_rng((cfg["seed"], 23, i))
        cloud = rng.normal(size=(24, 3))
        label = int(rng.integers(0, net.config.num_classes))
        errors = gradient_relative_errors(net, cloud, label)
        per_instance.append(max(errors))
        worst = max(worst, max(errors))
    passed = worst < cfg["tolerance"]
    return RunReport(
        "grad-check",
        cfg,
        metrics={"max_relative_error": worst, "per_instance": per_instance},
        passed=passed,
    )


def _grad_check_config():
    from .network import NetworkConfig

    return NetworkConfig(
        num_classes=3,
        conv_channels=(5, 7),
        keypoints=(12, 8),
        k_neighbors=6,
        head_hidden=(8,),
    )


def cmd_lrf_bench(args, file_config) -> RunReport:
    defaults = dict(
        seed=0,
        threads=None,
        inputs=None,
        pairs=1000,
        subsample_ratio=0.5,
        noise_factor=0.1,
        seeds=3,
        k_local=32,
        model_points=2048,
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = []
    if cfg["inputs"]:
        for path in cfg["inputs"]:
            models.append((Path(path).stem, load_cloud(path)))
    else:
        for i in range(3):
            models.append(
                (
                    f"bumpy{i}",
                    generate_bumpy_cloud(cfg["model_points"], seed=1000 * (i + 1)),
                )
            )
    summary = {}
    degenerate_total = 0
    for name, model in models:
        per_method = {}
        for method in REPEATABILITY_METHODS:
            means = []
            for s in range(cfg["seeds"]):
                result = repeatability_experiment(
                    model,
                    method=method,
                    subsample_ratio=cfg["subsample_ratio"],
                    noise_sigma_factor=cfg["noise_factor"],
                    n_pairs=cfg["pairs"],
                    k_local=cfg["k_local"],
                    seed=cfg["seed"] + s,
                )
                tag = f"{name}_{method}_seed{cfg['seed'] + s}"
                write_histogram_csv(result, out / f"{tag}.csv")
                write_repeatability_metadata(result, out / f"{tag}.json")
                means.append(result.mean_error)
                degenerate_total += result.degenerate_count
            per_method[method] = float(np.mean(means))
        summary[name] = per_method
    passed = all(
        row["weighted_global"] < row["local_pca"] for row in summary.values()
    )
    margins = {
        name: 1.0 - row["weighted_global"] / row["local_pca"]
        for name, row in summary.items()
        if row["local_pca"] > 0
    }
    return RunReport(
        "lrf-bench",
        cfg,
        metrics={"mean_error_deg": summary, "weighted_vs_local_margin": margins},
        passed=passed,
        degenerate_lrf_count=degenerate_total,
    )


def cmd_protocol_eval(args, file_config) -> RunReport:
    defaults = dict(
        seed=0,
        threads=None,
        epochs=60,
        train_per_class=100,
        test_per_class=40,
        points=256,
        jitter=0.01,
        arch="toy",
        min_accuracy=0.90,
        max_gap=0.02,
        max_std=0.01,
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_toy_dataset(
        cfg["train_per_class"],
        cfg["test_per_class"],
        n_points=cfg["points"],
        jitter=cfg["jitter"],
        seed=cfg["seed"],
    )
    arch = _ARCHES[cfg["arch"]]
    accuracies = {}
    degenerate = 0
    nets = {}
    for mode in (RotationMode.AROUND_Z, RotationMode.SO3):
        net = GcaNetwork(arch(), seed=cfg["seed"])
        train_cfg = TrainConfig(
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            rotation_train=mode,
            rotation_test=mode,
        )
        train(net, dataset, train_cfg, log_path=out / f"train_{mode.value}.csv")
        nets[mode] = net
    eval_seed = cfg["seed"] + 104729
    accuracies["z/z"] = evaluate(
        nets[RotationMode.AROUND_Z], dataset.test, RotationMode.AROUND_Z, eval_seed
    ).accuracy
    accuracies["z/so3"] = evaluate(
        nets[RotationMode.AROUND_Z], dataset.test, RotationMode.SO3, eval_seed
    ).accuracy
    accuracies["so3/so3"] = evaluate(
        nets[RotationMode.SO3], dataset.test, RotationMode.SO3, eval_seed
    ).accuracy
    triple = [accuracies["z/z"], accuracies["so3/so3"], accuracies["z/so3"]]
    gap = abs(accuracies["z/z"] - accuracies["z/so3"])
    spread = float(np.std(triple))
    passed = (
        accuracies["z/z"] >= cfg["min_accuracy"]
        and gap <= cfg["max_gap"]
        and spread <= cfg["max_std"]
    )
    for mode, net in nets.items():
        net.save(out / f"weights_{mode.value}.json")
    return RunReport(
        "protocol-eval",
        cfg,
        metrics={"accuracy": accuracies, "gap": gap, "std": spread},
        passed=passed,
        degenerate_lrf_count=degenerate,
    )


_ABLATION_TOGGLES = {
    "full": dict(weighted_lrf=True, use_o_vector=True, use_anchors=True),
    "no_weight": dict(weighted_lrf=False, use_o_vector=True, use_anchors=True),
    "no_weight_no_o": dict(weighted_lrf=False, use_o_vector=False, use_anchors=True),
    "no_anchor": dict(weighted_lrf=True, use_o_vector=True, use_anchors=False),
}


def cmd_ablation(args, file_config) -> RunReport:
    defaults = dict(
        seed=0,
        threads=None,
        sweep="both",
        seeds=3,
        epochs=15,
        train_per_class=30,
        test_per_class=10,
        points=256,
        jitter=0.01,
    )
    cfg = _resolve(defaults, file_config, args)
    cfg["threads"] = _threads(cfg["threads"])
    if cfg["sweep"] not in ("anchors", "toggles", "both"):
        raise UsageError(f"unknown sweep {cfg['sweep']!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = {}
    if cfg["sweep"] in ("anchors", "both"):
        for a in (1, 2, 4, 8):
            settings[f"anchors{a}"] = dict(anchor_count=a)
    if cfg["sweep"] in ("toggles", "both"):
        for name, toggles in _ABLATION_TOGGLES.items():
            settings.setdefault(name, dict(toggles))

    rows = []
    means = {}
    for name, overrides in settings.items():
        accs = []
        for s in range(cfg["seeds"]):
            run_seed = cfg["seed"] + s
            dataset = make_toy_dataset(
                cfg["train_per_class"],
                cfg["test_per_class"],
                n_points=cfg["points"],
                jitter=cfg["jitter"],
                seed=run_seed,
            )
            net = GcaNetwork(toy_network_config(**overrides), seed=run_seed)
            train_cfg = TrainConfig(
                epochs=cfg["epochs"],
                seed=run_seed,
                rotation_train=RotationMode.AROUND_Z,
                rotation_test=RotationMode.SO3,
            )
            train(net, dataset, train_cfg)
            acc = evaluate(
                net, dataset.test, RotationMode.SO3, seed=run_seed + 104729
            ).accuracy
            accs.append(acc)
            rows.append((name, run_seed, acc))
        means[name] = float(np.mean(accs))
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "seed", "test_acc"])
        writer.writerows(rows)

    checks = {}
    if "anchors8" in means and "anchors1" in means:
        checks["anchors8_ge_anchors1"] = means["anchors8"] >= means["anchors1"]
    if "full" in means and "no_anchor" in means:
        checks["full_ge_no_anchor"] = means["full"] >= means["no_anchor"]
    passed = all(checks.values()) if checks else True
    return RunReport(
        "ablation",
        cfg,
        metrics={"mean_accuracy": means, "checks": checks},
        passed=passed,
    )


class UsageError(ValueError):
    pass


_COMMANDS = {
    "gen-shapes": cmd_gen_shapes,
    "extract": cmd_extract,
    "invariance-check": cmd_invariance_check,
    "grad-check": cmd_grad_check,
    "lrf-bench": cmd_lrf_bench,
    "protocol-eval": cmd_protocol_eval,
    "ablation": cmd_ablation,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gca",
        description="Rotation-invariant point cloud feature experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=f"gca-out/{name}")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        return p

    p = add("gen-shapes", "write the synthetic shape dataset and manifests")
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--jitter", type=float)

    p = add("extract", "dump keypoints, frames, and anchors for one cloud")
    p.add_argument("--input", type=str)
    p.add_argument("--shape", type=str, choices=[k.value for k in ShapeKind])
    p.add_argument("--points", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--keypoints", type=int)
    p.add_argument("--anchor-count", dest="anchor_count", type=int, choices=(1, 2, 4, 8))
    p.add_argument("--unweighted", dest="weighted", action="store_false", default=None)
    p.add_argument(
        "--no-o-vector", dest="use_o_vector", action="store_false", default=None
    )
    p.add_argument(
        "--dump-anchors", dest="dump_anchors", action="store_true", default=None
    )

    p = add("invariance-check", "verify logits are unchanged under SO3 rotations")
    p.add_argument("--trials", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--arch", choices=sorted(_ARCHES))
    p.add_argument("--tolerance", type=float)

    p = add("grad-check", "verify analytic gradients against finite differences")
    p.add_argument("--instances", type=int)
    p.add_argument("--tolerance", type=float)

    p = add("lrf-bench", "frame repeatability histograms under noise and subsampling")
    p.add_argument("--inputs", nargs="+", type=str)
    p.add_argument("--pairs", type=int)
    p.add_argument("--subsample-ratio", dest="subsample_ratio", type=float)
    p.add_argument("--noise-factor", dest="noise_factor", type=float)
    p.add_argument("--seeds", type=int)
    p.add_argument("--k-local", dest="k_local", type=int)
    p.add_argument("--model-points", dest="model_points", type=int)

    p = add("protocol-eval", "train under z and SO3, evaluate the protocol triple")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--arch", choices=sorted(_ARCHES))
    p.add_argument("--min-accuracy", dest="min_accuracy", type=float)
    p.add_argument("--max-gap", dest="max_gap", type=float)
    p.add_argument("--max-std", dest="max_std", type=float)

    p = add("ablation", "accuracy sweeps over anchor counts and feature toggles")
    p.add_argument("--sweep", choices=("anchors", "toggles", "both"))
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--jitter", type=float)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    file_config = {}
    if args.config:
        try:
            file_config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"gca: cannot read config {args.config}: {exc}", file=sys.stderr)
            return 2
    handler = _COMMANDS[args.command]
    start = time.monotonic()
    try:
        report = handler(args, file_config)
    except (UsageError, KeyError, CloudParseError, FileNotFoundError) as exc:
        print(f"gca: {exc}", file=sys.stderr)
        return 2
    report.wall_clock_s = time.monotonic() - start
    out_dir = Path(args.out)
    report.write(out_dir)
    status = "PASS" if report.passed else "FAIL"
    print(f"{report.experiment}: {status} ({report.wall_clock_s:.1f}s)")
    for key, value in report.metrics.items():
        print(f"  {key}: {value}")
    print(f"  report: {out_dir / 'report.json'}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
