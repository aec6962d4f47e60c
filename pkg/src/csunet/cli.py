"""Command-line entry point.

Subcommands: synth (phantom dataset generation), train (overfit, one fold, or
full cross-validation per the run config), eval, predict, gradcheck. Exit
codes are a stable contract: 0 success, 1 verification or numerical failure,
2 usage/config error. No command mutates its inputs; everything a run writes
goes under the explicitly given output directory, including the fully
resolved config for reproducibility.

The run config is one JSON document with optional sections "network",
"training", "loss" (defaults apply per section) and "paths" ({"out": DIR});
unknown keys anywhere are rejected before any work starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import dataio
from .dataio import (
    DatasetManifest,
    PhantomSpec,
    VolumeRecord,
    generate_phantom,
    load_checkpoint,
    load_manifest,
    load_samples,
    read_volume,
    save_checkpoint,
    save_manifest,
    write_volume,
)
from .gradcheck import standard_battery
from .losses import LossConfig
from .metrics import argmax_labels
from .network import ConfigError, NetworkConfig, build_network
from .runtime import configure_threads
from .tensor import Tensor, no_grad
from .training import TrainConfig, cross_validate, evaluate, fit, kfold_split

SOLID_CONTRAST = 0.8
GROUND_GLASS_CONTRAST = 0.25
METRIC_KEYS = ("sen", "dsc", "pre", "miou")


@dataclass
class RunConfig:
    network: NetworkConfig
    training: TrainConfig
    loss: LossConfig
    out: str | None = None

    def resolved(self, out_dir):
        return {
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "loss": self.loss.to_dict(),
            "paths": {"out": out_dir},
        }


def load_run_config(path):
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read().decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = sorted(set(doc) - {"network", "training", "loss", "paths"})
    if unknown:
        raise ConfigError(f"{path}: unknown run config sections: {unknown}")
    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError(f"{path}: 'paths' must be an object")
    bad = sorted(set(paths) - {"out"})
    if bad:
        raise ConfigError(f"{path}: unknown paths keys: {bad}")
    return RunConfig(
        network=NetworkConfig.from_dict(doc.get("network", {})),
        training=TrainConfig.from_dict(doc.get("training", {})),
        loss=LossConfig.from_dict(doc.get("loss", {})),
        out=paths.get("out"),
    )


def _write_json(path, obj):
    dataio._atomic_write(path, json.dumps(obj, indent=2, allow_nan=False).encode("utf-8") + b"\n")


def _resolve_manifest_path(data):
    if os.path.isdir(data):
        return os.path.join(data, "manifest.json")
    return data


def _load_dataset(data, net_config=None):
    manifest = load_manifest(_resolve_manifest_path(data))
    samples = load_samples(manifest)
    if net_config is not None:
        e = net_config.input_extent
        for rec, (image, _mask) in zip(manifest.samples, samples):
            if image.shape != (net_config.in_channels, e, e, e):
                raise ConfigError(
                    f"sample {rec.id!r} has shape {image.shape}, network expects "
                    f"({net_config.in_channels}, {e}, {e}, {e})"
                )
    return manifest, samples


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    if not 0.0 <= args.ground_glass_fraction <= 1.0:
        raise ConfigError(f"--ground-glass-fraction must be in [0, 1], got {args.ground_glass_fraction}")
    n_gg = round(args.ground_glass_fraction * args.count)
    master = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)

    records = []
    for i in range(args.count):
        radius = float(master.uniform(args.extent / 6.0, args.extent / 4.0))
        sample_seed = int(master.integers(2**63))
        contrast = GROUND_GLASS_CONTRAST if i < n_gg else SOLID_CONTRAST
        spec = PhantomSpec(extent=args.extent, radius=radius, contrast=contrast, seed=sample_seed)
        image, mask = generate_phantom(spec)
        sid = f"s{i:03d}"
        image_path = os.path.join(args.out, f"{sid}.image.csuv")
        mask_path = os.path.join(args.out, f"{sid}.mask.csuv")
        write_volume(image_path, image)
        write_volume(mask_path, mask[None])
        records.append(
            VolumeRecord(id=sid, image_path=image_path, mask_path=mask_path, extent=args.extent, contrast=contrast)
        )

    screening = (
        f"synthetic spherical nodule phantoms: count={args.count} extent={args.extent} "
        f"seed={args.seed} ground_glass_fraction={args.ground_glass_fraction}; "
        f"contrast {GROUND_GLASS_CONTRAST} (ground glass) / {SOLID_CONTRAST} (solid); "
        f"radius uniform in [extent/6, extent/4]; noise sigma 0.1"
    )
    save_manifest(DatasetManifest(samples=records, screening=screening), os.path.join(args.out, "manifest.json"))
    print(f"wrote {args.count} samples ({n_gg} ground-glass) under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _fit_single(run, train_samples, val_samples, tag, out_dir):
    net = build_network(run.network)
    result = fit(net, train_samples, val_samples, run.training, run.loss, log=print)
    scores = evaluate(net, val_samples, run.training.batch_size)
    save_checkpoint(os.path.join(out_dir, f"{tag}.csuc"), net)
    _write_json(os.path.join(out_dir, f"{tag}.history.json"), result["history"])
    return result, scores


def cmd_train(args):
    run = load_run_config(args.config)
    out_dir = args.out if args.out is not None else run.out
    if out_dir is None:
        raise ConfigError("no output directory: set paths.out in the config or pass --out")
    _manifest, samples = _load_dataset(args.data, run.network)
    if args.fold is not None and not 0 <= args.fold < run.training.folds:
        raise ConfigError(f"--fold must be in [0, {run.training.folds}), got {args.fold}")

    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.resolved.json"), run.resolved(out_dir))
    base_config = {
        "network": run.network.to_dict(),
        "training": run.training.to_dict(),
        "loss": run.loss.to_dict(),
    }

    if run.training.overfit:
        result, scores = _fit_single(run, samples, samples, "best", out_dir)
        report = {
            "mode": "overfit",
            "samples": len(samples),
            "best_epoch": result["best_epoch"],
            "epochs_run": result["epochs_run"],
            "metrics": {m: scores[m] for m in METRIC_KEYS},
            "config": base_config,
        }
        _write_json(os.path.join(out_dir, "report.json"), report)
        print(f"overfit: dsc {scores['dsc']:.4f} after {result['epochs_run']} epochs")
        return 0

    if args.fold is not None:
        folds = kfold_split(range(len(samples)), run.training.folds, run.training.seed)
        held_out = set(folds[args.fold])
        val = [samples[i] for i in sorted(held_out)]
        train = [samples[i] for i in range(len(samples)) if i not in held_out]
        result, scores = _fit_single(run, train, val, f"fold_{args.fold}", out_dir)
        report = {
            "mode": "single_fold",
            "fold": args.fold,
            "train_samples": len(train),
            "val_samples": len(val),
            "best_epoch": result["best_epoch"],
            "epochs_run": result["epochs_run"],
            "metrics": {m: scores[m] for m in METRIC_KEYS},
            "config": base_config,
        }
        _write_json(os.path.join(out_dir, f"fold_{args.fold}.report.json"), report)
        print(f"fold {args.fold}: dsc {scores['dsc']:.4f}")
        return 0

    report, outcomes = cross_validate(run.network, samples, run.training, run.loss, log=print)
    for outcome in outcomes:
        save_checkpoint(os.path.join(out_dir, f"fold_{outcome.fold}.csuc"), outcome.net)
        _write_json(os.path.join(out_dir, f"fold_{outcome.fold}.history.json"), outcome.result["history"])
    _write_json(os.path.join(out_dir, "cv_report.json"), report)
    mean, std = report["mean"], report["std"]
    for m in METRIC_KEYS:
        print(f"{m} {mean[m]:.4f} +/- {std[m]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval / predict


def cmd_eval(args):
    net = load_checkpoint(args.model)
    _manifest, samples = _load_dataset(args.data, net.config)
    scores = evaluate(net, samples)
    for m in METRIC_KEYS:
        print(f"{m} {scores[m]:.6f}")
    if args.out:
        _write_json(args.out, {"samples": len(samples), "metrics": {m: scores[m] for m in METRIC_KEYS}})
    return 0


def cmd_predict(args):
    net = load_checkpoint(args.model)
    volume = read_volume(args.input)
    with no_grad():
        logits = net(Tensor(volume[None].astype(net.dtype, copy=False)))
    pred = argmax_labels(logits.data)[0].astype(np.uint8)
    write_volume(args.output, pred[None])
    fg = float(pred.mean())
    print(f"wrote {args.output} (foreground fraction {fg:.4f})")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    if not args.tol > 0:
        raise ConfigError(f"--tol must be positive, got {args.tol}")
    results = standard_battery(tol=args.tol, tol_linear=min(args.tol, 1e-5))
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:45s} max_rel_err {r.max_rel_err:.3e} (tol {r.tol:g}, {r.n_coords} coords)")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="csunet", description="3D nodule segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--extent", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ground-glass-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train per the run config (overfit, one fold, or full CV)")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--fold", type=int, default=None, help="train this single fold only")
    p.add_argument("--out", default=None, help="output directory (overrides paths.out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="also write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the argmax mask for one volume")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the gradient verification battery")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    configure_threads()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
