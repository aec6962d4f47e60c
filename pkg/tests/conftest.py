"""Shared fixtures: deterministic thread mode plus the two expensive
desk-scale training runs (overfit and cross-validation), session-scoped so
the acceptance tests and the behavioral tests share one run each."""

import json
import os
import time
from types import SimpleNamespace

os.environ["CSUNET_THREADS"] = "0"

import pytest
from hypothesis import settings

from csunet.runtime import configure_threads

configure_threads()

from csunet.cli import main as cli_main

settings.register_profile("desk", deadline=None, max_examples=50)
settings.load_profile("desk")

# Desk-scale surrogate for the full training protocol: thin channels, small
# extent, Dice + weighted cross-entropy, Adam.
OVERFIT_NETWORK = {
    "stage_channels": [4, 8, 16, 32],
    "input_extent": 32,
    "variant": "base_cr",
    "seed": 0,
}
OVERFIT_TRAINING = {
    "lr": 0.003,
    "max_epochs": 60,
    "patience": 10,
    "batch_size": 2,
    "flip_h": False,
    "flip_w": False,
    "overfit": True,
    "seed": 0,
}
CV_TRAINING = {
    "lr": 0.003,
    "max_epochs": 40,
    "patience": 8,
    "batch_size": 2,
    "folds": 5,
    "seed": 0,
}
LOSS = {"ce_weight": 0.3}


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n")


# One verdict line per acceptance check, echoed after the test summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Train base_cr to convergence on 4 solid phantoms at 32^3 (one run)."""
    root = tmp_path_factory.mktemp("overfit")
    data = root / "data"
    out = root / "run"
    synth_rc = cli_main(["synth", "--out", str(data), "--count", "4", "--extent", "32", "--seed", "0"])
    config = {"network": OVERFIT_NETWORK, "training": OVERFIT_TRAINING, "loss": LOSS, "paths": {"out": str(out)}}
    cfg_path = root / "config.json"
    write_json(cfg_path, config)
    t0 = time.perf_counter()
    train_rc = cli_main(["train", "--config", str(cfg_path), "--data", str(data)])
    seconds = time.perf_counter() - t0
    report = json.loads((out / "report.json").read_text()) if train_rc == 0 else None
    history = json.loads((out / "best.history.json").read_text()) if train_rc == 0 else None
    return SimpleNamespace(
        data=data,
        out=out,
        config=config,
        synth_rc=synth_rc,
        train_rc=train_rc,
        report=report,
        history=history,
        seconds=seconds,
        checkpoint=out / "best.csuc",
    )


@pytest.fixture(scope="session")
def cv_run(tmp_path_factory):
    """Full 5-fold cross-validation on 10 solid phantoms at 32^3 (one run)."""
    root = tmp_path_factory.mktemp("cv")
    data = root / "data"
    out = root / "run"
    synth_rc = cli_main(["synth", "--out", str(data), "--count", "10", "--extent", "32", "--seed", "11"])
    config = {"network": OVERFIT_NETWORK, "training": CV_TRAINING, "loss": LOSS, "paths": {"out": str(out)}}
    cfg_path = root / "config.json"
    write_json(cfg_path, config)
    t0 = time.perf_counter()
    train_rc = cli_main(["train", "--config", str(cfg_path), "--data", str(data)])
    seconds = time.perf_counter() - t0
    report = json.loads((out / "cv_report.json").read_text()) if train_rc == 0 else None
    return SimpleNamespace(
        data=data,
        out=out,
        config=config,
        synth_rc=synth_rc,
        train_rc=train_rc,
        report=report,
        seconds=seconds,
    )
