"""End-to-end command-line flows on desk-scale data: synth determinism and
composition, the three train modes, eval, predict, and the exit-code contract
(0 success, 1 numerical failure, 2 usage/config error)."""

import json
import os

import numpy as np
import pytest

from csunet.cli import load_run_config, main
from csunet.dataio import PhantomSpec, generate_phantom, read_volume, write_volume

TINY_NETWORK = {"stage_channels": [2, 4, 6, 8], "input_extent": 16, "variant": "base_cr", "seed": 0}
TINY_TRAINING = {
    "lr": 3e-3,
    "batch_size": 2,
    "max_epochs": 2,
    "patience": 2,
    "flip_h": False,
    "flip_w": False,
    "seed": 0,
}


def write_config(path, *, out=None, overfit=False, folds=None, **extra):
    training = dict(TINY_TRAINING, overfit=overfit)
    if folds is not None:
        training["folds"] = folds
    doc = {"network": TINY_NETWORK, "training": training, "loss": {"ce_weight": 0.3}}
    if out is not None:
        doc["paths"] = {"out": str(out)}
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


def synth(out, count=4, extent=16, seed=0, fraction=None):
    argv = ["synth", "--out", str(out), "--count", str(count), "--extent", str(extent), "--seed", str(seed)]
    if fraction is not None:
        argv += ["--ground-glass-fraction", str(fraction)]
    return main(argv)


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_the_expected_files(tmp_path):
    out = tmp_path / "data"
    assert synth(out, count=4) == 0
    names = sorted(p.name for p in out.iterdir())
    expected = sorted(
        [f"s{i:03d}.image.csuv" for i in range(4)] + [f"s{i:03d}.mask.csuv" for i in range(4)] + ["manifest.json"]
    )
    assert names == expected
    doc = json.loads((out / "manifest.json").read_text())
    assert len(doc["samples"]) == 4
    assert doc["screening"]  # generation parameters are recorded
    for row in doc["samples"]:
        assert not os.path.isabs(row["image"])


def test_synth_is_deterministic_across_directories(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert synth(a, count=3, seed=5) == 0
    assert synth(b, count=3, seed=5) == 0
    for name in sorted(p.name for p in a.iterdir()):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    c = tmp_path / "c"
    assert synth(c, count=3, seed=6) == 0
    assert (a / "s000.image.csuv").read_bytes() != (c / "s000.image.csuv").read_bytes()


def test_synth_ground_glass_fraction_controls_contrast(tmp_path):
    out = tmp_path / "gg"
    assert synth(out, count=4, fraction=0.5) == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert [row["contrast"] for row in doc["samples"]] == [0.25, 0.25, 0.8, 0.8]

    out_all = tmp_path / "all_gg"
    assert synth(out_all, count=3, fraction=1.0) == 0
    doc = json.loads((out_all / "manifest.json").read_text())
    assert [row["contrast"] for row in doc["samples"]] == [0.25, 0.25, 0.25]


def test_synth_rejects_bad_arguments(tmp_path):
    assert synth(tmp_path / "x", count=0) == 2
    assert main(["synth", "--out", str(tmp_path / "y"), "--ground-glass-fraction", "1.5"]) == 2


# ---------------------------------------------------------------------------
# config handling


def test_malformed_config_exits_2_without_writing(tmp_path):
    data = tmp_path / "data"
    assert synth(data) == 0
    config = tmp_path / "bad.json"
    config.write_text("{this is not json")
    out = tmp_path / "out"
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(out)]) == 2
    assert not out.exists()


def test_unknown_config_keys_exit_2(tmp_path):
    data = tmp_path / "data"
    assert synth(data) == 0
    out = tmp_path / "out"

    config = write_config(tmp_path / "c1.json", out=out, optimizer_v2={})
    assert main(["train", "--config", str(config), "--data", str(data)]) == 2

    doc = {"network": dict(TINY_NETWORK, growth_rate=12), "training": TINY_TRAINING}
    config = tmp_path / "c2.json"
    config.write_text(json.dumps(doc))
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(out)]) == 2

    doc = {"network": TINY_NETWORK, "paths": {"out": str(out), "cache": "/tmp"}}
    config.write_text(json.dumps(doc))
    assert main(["train", "--config", str(config), "--data", str(data)]) == 2
    assert not out.exists()


def test_train_without_an_output_directory_exits_2(tmp_path):
    data = tmp_path / "data"
    assert synth(data) == 0
    config = write_config(tmp_path / "c.json")  # no paths.out
    assert main(["train", "--config", str(config), "--data", str(data)]) == 2


def test_missing_data_exits_2(tmp_path):
    config = write_config(tmp_path / "c.json", out=tmp_path / "out", overfit=True)
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "nowhere")]) == 2


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["trian"]) == 2
    assert main(["synth", "--no-such-flag"]) == 2
    assert main(["gradcheck", "--tol", "-1"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# train modes


def test_overfit_train_eval_predict_flow(tmp_path, capsys):
    data = tmp_path / "data"
    assert synth(data, count=2) == 0
    out = tmp_path / "run"
    config = write_config(tmp_path / "c.json", out=tmp_path / "ignored", overfit=True)

    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip().endswith("epochs")
    for name in ("best.csuc", "best.history.json", "report.json", "config.resolved.json"):
        assert (out / name).exists(), name

    # the flag overrides paths.out, and the resolved config records the winner
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert set(resolved) == {"network", "training", "loss", "paths"}
    assert resolved["paths"]["out"] == str(out)
    assert not (tmp_path / "ignored").exists()

    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == "overfit"
    assert report["samples"] == 2
    assert set(report["metrics"]) == {"sen", "dsc", "pre", "miou"}
    assert report["epochs_run"] == len(json.loads((out / "best.history.json").read_text()))

    # eval on the training data reproduces the report metrics exactly
    metrics_path = tmp_path / "metrics.json"
    assert main(["eval", "--model", str(out / "best.csuc"), "--data", str(data), "--out", str(metrics_path)]) == 0
    evaluated = json.loads(metrics_path.read_text())
    assert evaluated["samples"] == 2
    assert evaluated["metrics"] == report["metrics"]

    # predict writes a binary mask of the input's extent
    pred_path = tmp_path / "pred.csuv"
    rc = main(["predict", "--model", str(out / "best.csuc"), "--input", str(data / "s000.image.csuv"),
               "--output", str(pred_path)])
    assert rc == 0
    pred = read_volume(pred_path)
    assert pred.shape == (1, 16, 16, 16) and pred.dtype == np.uint8
    assert set(np.unique(pred)) <= {0, 1}
    capsys.readouterr()


def test_single_fold_train(tmp_path, capsys):
    data = tmp_path / "data"
    assert synth(data, count=4) == 0
    out = tmp_path / "run"
    config = write_config(tmp_path / "c.json", out=out, folds=2)

    assert main(["train", "--config", str(config), "--data", str(data), "--fold", "1"]) == 0
    for name in ("fold_1.csuc", "fold_1.history.json", "fold_1.report.json", "config.resolved.json"):
        assert (out / name).exists(), name
    assert not (out / "fold_0.csuc").exists()
    report = json.loads((out / "fold_1.report.json").read_text())
    assert report["mode"] == "single_fold" and report["fold"] == 1
    assert report["train_samples"] + report["val_samples"] == 4

    assert main(["train", "--config", str(config), "--data", str(data), "--fold", "7"]) == 2
    assert main(["train", "--config", str(config), "--data", str(data), "--fold", "-1"]) == 2
    capsys.readouterr()


def test_full_cross_validation_train(tmp_path, capsys):
    data = tmp_path / "data"
    assert synth(data, count=4) == 0
    out = tmp_path / "run"
    config = write_config(tmp_path / "c.json", out=out, folds=2)

    assert main(["train", "--config", str(config), "--data", str(data)]) == 0
    for k in range(2):
        assert (out / f"fold_{k}.csuc").exists()
        assert (out / f"fold_{k}.history.json").exists()
    report = json.loads((out / "cv_report.json").read_text())
    assert len(report["folds"]) == 2
    assert set(report["mean"]) == set(report["std"]) == {"sen", "dsc", "pre", "miou"}
    assert "paths" not in report["config"]
    printed = capsys.readouterr().out
    assert "+/-" in printed


def test_resolved_config_round_trips(tmp_path):
    data = tmp_path / "data"
    assert synth(data, count=2) == 0
    out = tmp_path / "run"
    config = write_config(tmp_path / "c.json", out=out, overfit=True)
    assert main(["train", "--config", str(config), "--data", str(data)]) == 0

    run = load_run_config(out / "config.resolved.json")
    assert run.network.stage_channels == (2, 4, 6, 8)
    assert run.network.input_extent == 16
    assert run.network.variant == "base_cr"
    assert run.training.overfit is True
    assert run.out == str(out)


def test_train_rejects_wrong_extent_data(tmp_path):
    data = tmp_path / "data"
    assert synth(data, count=2, extent=32) == 0  # network expects 16
    config = write_config(tmp_path / "c.json", out=tmp_path / "out", overfit=True)
    assert main(["train", "--config", str(config), "--data", str(data)]) == 2
    assert not (tmp_path / "out").exists()


# ---------------------------------------------------------------------------
# predict edge cases


def test_predict_extent_mismatch_exits_2(tmp_path, capsys):
    data = tmp_path / "data"
    assert synth(data, count=2) == 0
    out = tmp_path / "run"
    config = write_config(tmp_path / "c.json", out=out, overfit=True)
    assert main(["train", "--config", str(config), "--data", str(data)]) == 0
    capsys.readouterr()

    wrong = tmp_path / "wrong.csuv"
    write_volume(wrong, np.zeros((1, 8, 8, 8), dtype=np.float32))
    rc = main(["predict", "--model", str(out / "best.csuc"), "--input", str(wrong), "--output", str(tmp_path / "p.csuv")])
    assert rc == 2
    assert not (tmp_path / "p.csuv").exists()


def test_predict_on_noise_finds_almost_nothing(tmp_path, overfit_run):
    rng = np.random.default_rng(0)
    noise = rng.normal(0.0, 0.1, size=(1, 32, 32, 32)).astype(np.float32)
    noise_path = tmp_path / "noise.csuv"
    write_volume(noise_path, noise)
    pred_path = tmp_path / "pred.csuv"
    rc = main(["predict", "--model", str(overfit_run.checkpoint), "--input", str(noise_path),
               "--output", str(pred_path)])
    assert rc == 0
    assert read_volume(pred_path).mean() < 0.05
