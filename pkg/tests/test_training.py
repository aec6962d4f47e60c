"""Training protocol: optimizer steps against scalar-python traces, flip
augmentation, seeded k-fold splitting, the early-stopping contract, and the
fit / cross-validate drivers on desk-scale networks."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csunet.dataio import PhantomSpec, generate_phantom, load_checkpoint
from csunet.losses import LossConfig
from csunet.modules import Parameter
from csunet.network import ConfigError, NetworkConfig, build_network
from csunet.training import (
    Adam,
    SGD,
    EarlyStopping,
    TrainConfig,
    augment_flip,
    cross_validate,
    evaluate,
    fit,
    flip_volume,
    kfold_split,
    make_optimizer,
    train_step,
)
from oracles import adam_oracle, sgd_oracle

TINY_NET = NetworkConfig(stage_channels=(2, 4, 6, 8), input_extent=16, variant="base_cr", seed=0)


def phantom_samples(n, seed, extent=16, contrast=0.8, radius=2.5):
    return [
        generate_phantom(PhantomSpec(extent=extent, radius=radius, contrast=contrast, seed=seed + i))
        for i in range(n)
    ]


def quick_config(**kw):
    base = dict(lr=3e-3, batch_size=2, max_epochs=3, patience=2, flip_h=False, flip_w=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# optimizers


def test_adam_matches_the_scalar_trace():
    rng = np.random.default_rng(0)
    start = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(5)]
    p = Parameter(start.copy())
    opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    for g in grads:
        p.value.grad = g
        opt.step()
    want = adam_oracle(start, grads, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    np.testing.assert_allclose(p.data, want, rtol=1e-12, atol=0)


def test_sgd_matches_the_scalar_trace():
    rng = np.random.default_rng(1)
    start = rng.standard_normal(7)
    grads = [rng.standard_normal(7) for _ in range(4)]
    p = Parameter(start.copy())
    opt = SGD([p], lr=0.05, momentum=0.9)
    for g in grads:
        p.value.grad = g
        opt.step()
    np.testing.assert_allclose(p.data, sgd_oracle(start, grads, lr=0.05, momentum=0.9), rtol=1e-12, atol=0)


def test_optimizers_skip_parameters_without_gradients():
    for opt_cls in (lambda ps: Adam(ps, lr=0.1), lambda ps: SGD(ps, lr=0.1)):
        touched = Parameter(np.ones(3))
        untouched = Parameter(np.ones(3))
        opt = opt_cls([touched, untouched])
        touched.value.grad = np.full(3, 2.0)
        opt.step()
        assert not np.array_equal(touched.data, np.ones(3))
        np.testing.assert_array_equal(untouched.data, np.ones(3))


def test_make_optimizer_dispatch():
    p = [Parameter(np.zeros(2))]
    assert isinstance(make_optimizer(p, TrainConfig(optimizer="adam")), Adam)
    assert isinstance(make_optimizer(p, TrainConfig(optimizer="sgd")), SGD)
    with pytest.raises(ConfigError):
        make_optimizer(p, TrainConfig(optimizer="lbfgs"))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="newton").validate()
    with pytest.raises(ConfigError):
        TrainConfig(folds=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(min_delta=-1e-3).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1, "warmup": 5})
    assert TrainConfig.from_dict(TrainConfig(lr=0.02).to_dict()) == TrainConfig(lr=0.02)


# ---------------------------------------------------------------------------
# augmentation


def test_flip_volume_is_an_involution_case_by_case():
    rng = np.random.default_rng(2)
    image = rng.standard_normal((1, 4, 5, 6))
    mask = rng.integers(0, 2, (4, 5, 6))
    for h in (False, True):
        for w in (False, True):
            i2, m2 = flip_volume(*flip_volume(image, mask, h, w), h, w)
            np.testing.assert_array_equal(i2, image)
            np.testing.assert_array_equal(m2, mask)


def test_flip_volume_moves_a_marked_corner():
    image = np.zeros((1, 2, 3, 3))
    image[0, 0, 0, 0] = 1.0
    flipped, _ = flip_volume(image, np.zeros((2, 3, 3)), True, True)
    assert flipped[0, 0, 2, 2] == 1.0 and flipped[0, 0, 0, 0] == 0.0
    flipped, _ = flip_volume(image, np.zeros((2, 3, 3)), False, True)
    assert flipped[0, 0, 0, 2] == 1.0


@given(st.integers(0, 2**32 - 1), st.booleans(), st.booleans())
def test_flip_volume_involution_property(seed, h, w):
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((1, 3, 4, 2))
    mask = rng.integers(0, 2, (3, 4, 2))
    i2, m2 = flip_volume(*flip_volume(image, mask, h, w), h, w)
    np.testing.assert_array_equal(i2, image)
    np.testing.assert_array_equal(m2, mask)


def test_augment_flip_draws_one_coin_per_enabled_axis_h_first():
    image = np.arange(24.0).reshape(1, 2, 3, 4)
    mask = np.arange(24).reshape(2, 3, 4) % 2

    probe = np.random.default_rng(3)
    first, second = probe.random(), probe.random()
    got_i, got_m = augment_flip(image, mask, np.random.default_rng(3), TrainConfig(flip_h=True, flip_w=True))
    want_i, want_m = flip_volume(image, mask, first < 0.5, second < 0.5)
    np.testing.assert_array_equal(got_i, want_i)
    np.testing.assert_array_equal(got_m, want_m)

    # with H disabled the W coin uses the first draw
    got_i, _ = augment_flip(image, mask, np.random.default_rng(3), TrainConfig(flip_h=False, flip_w=True))
    want_i, _ = flip_volume(image, mask, False, first < 0.5)
    np.testing.assert_array_equal(got_i, want_i)


def test_augment_flip_disabled_axes_never_flip():
    rng = np.random.default_rng(4)
    image = rng.standard_normal((1, 3, 3, 3))
    mask = rng.integers(0, 2, (3, 3, 3))
    for _ in range(20):
        got_i, got_m = augment_flip(image, mask, rng, TrainConfig(flip_h=False, flip_w=False))
        np.testing.assert_array_equal(got_i, image)
        np.testing.assert_array_equal(got_m, mask)


# ---------------------------------------------------------------------------
# k-fold splitting


def test_kfold_of_751_into_5_gives_the_expected_sizes():
    folds = kfold_split(range(751), 5, seed=0)
    assert [len(f) for f in folds] == [151, 150, 150, 150, 150]
    assert sorted(i for f in folds for i in f) == list(range(751))


def test_kfold_is_deterministic_and_seed_sensitive():
    a = kfold_split(range(40), 5, seed=7)
    b = kfold_split(range(40), 5, seed=7)
    c = kfold_split(range(40), 5, seed=8)
    assert a == b
    assert a != c


def test_kfold_keeps_caller_ids():
    ids = [f"case{i}" for i in range(10)]
    folds = kfold_split(ids, 2, seed=0)
    assert sorted(i for f in folds for i in f) == sorted(ids)


def test_kfold_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        kfold_split(range(10), 1, seed=0)
    with pytest.raises(ConfigError):
        kfold_split(range(3), 4, seed=0)


@given(st.integers(2, 7), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_kfold_partition_property(k, extra, seed):
    n = k + extra
    folds = kfold_split(range(n), k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)
    assert sorted(i for f in folds for i in f) == list(range(n))


# ---------------------------------------------------------------------------
# early stopping


def test_early_stopping_scripted_plateau():
    stopper = EarlyStopping(patience=10)
    values = [0.1 * (i + 1) for i in range(6)] + [0.6] * 20
    stopped_at = None
    for epoch, v in enumerate(values):
        improved = stopper.update(v)
        assert improved == (epoch <= 5)
        if stopper.should_stop:
            stopped_at = epoch
            break
    assert stopped_at == 15
    assert stopper.best_epoch == 5
    assert stopper.best_value == pytest.approx(0.6)


def test_early_stopping_min_delta_gates_improvement():
    stopper = EarlyStopping(patience=3, min_delta=0.05)
    assert stopper.update(0.50)            # anything beats -inf
    assert not stopper.update(0.54)        # +0.04 is below the gate
    assert stopper.update(0.56)            # +0.06 clears it
    assert stopper.best_epoch == 2
    assert stopper.stale == 0


def test_early_stopping_never_fires_before_patience():
    stopper = EarlyStopping(patience=4)
    stopper.update(1.0)
    for _ in range(3):
        stopper.update(0.0)
        assert not stopper.should_stop
    stopper.update(0.0)
    assert stopper.should_stop


# ---------------------------------------------------------------------------
# train_step / evaluate / fit


def test_train_step_updates_parameters_and_returns_the_loss():
    net = build_network(TINY_NET)
    net.train()
    samples = phantom_samples(2, seed=100)
    images = np.stack([s[0] for s in samples])
    labels = np.stack([s[1] for s in samples])
    opt = make_optimizer(net.parameters(), quick_config())
    before = net.registry()["head.weight"].data.copy()
    value = train_step(net, images, labels, LossConfig(ce_weight=0.3), opt)
    assert isinstance(value, float) and np.isfinite(value)
    assert not np.array_equal(net.registry()["head.weight"].data, before)


def test_evaluate_is_pure_and_leaves_eval_mode():
    net = build_network(TINY_NET)
    net.train()
    buffers = {n: a.copy() for n, a in net.named_state() if "running" in n}
    scores = evaluate(net, phantom_samples(3, seed=200))
    assert not net.training
    assert set(scores) == {"sen", "pre", "dsc", "miou"}
    for n, a in net.named_state():
        if "running" in n:
            np.testing.assert_array_equal(a, buffers[n])


def test_fit_halts_after_patience_epochs_without_improvement():
    net = build_network(TINY_NET)
    config = quick_config(lr=1e-12, max_epochs=30, patience=2, min_delta=1.1)
    result = fit(net, phantom_samples(2, seed=300), phantom_samples(1, seed=310), config)
    # epoch 0 improves on -inf; nothing can clear a 1.1 gate afterwards
    assert result["epochs_run"] == config.patience + 1
    assert result["best_epoch"] == 0


def test_fit_restores_the_best_epoch_state():
    net = build_network(TINY_NET)
    val = phantom_samples(2, seed=410)
    result = fit(net, phantom_samples(3, seed=400), val, quick_config(max_epochs=5, patience=5))
    assert evaluate(net, val)["dsc"] == result["best_val_dsc"]


def test_fit_history_is_consistent():
    net = build_network(TINY_NET)
    result = fit(net, phantom_samples(2, seed=500), phantom_samples(1, seed=510), quick_config(max_epochs=4, patience=4))
    history = result["history"]
    assert result["epochs_run"] == len(history)
    assert [row["epoch"] for row in history] == list(range(len(history)))
    for row in history:
        assert set(row) == {"epoch", "train_loss", "val_dsc", "val_sen", "val_pre", "val_miou"}
    dscs = [row["val_dsc"] for row in history]
    best = result["best_epoch"]
    # a later epoch may sit within min_delta of the recorded best without claiming it
    assert dscs[best] >= max(dscs) - 1e-6
    assert all(v < dscs[best] for v in dscs[:best])
    assert result["best_val_dsc"] == dscs[best]


def test_fit_rejects_empty_sample_lists():
    net = build_network(TINY_NET)
    with pytest.raises(ConfigError):
        fit(net, [], phantom_samples(1, seed=0), quick_config())
    with pytest.raises(ConfigError):
        fit(net, phantom_samples(1, seed=0), [], quick_config())


# ---------------------------------------------------------------------------
# cross-validation


def test_cross_validate_report_shape_and_arithmetic():
    samples = phantom_samples(4, seed=600)
    config = quick_config(max_epochs=2, patience=2, folds=2)
    report, outcomes = cross_validate(TINY_NET, samples, config, LossConfig(ce_weight=0.3))

    assert [r["fold"] for r in report["folds"]] == [0, 1]
    keys = {"sen", "dsc", "pre", "miou"}
    for r in report["folds"]:
        assert set(r) == keys | {"fold"}
    for stat in ("mean", "std"):
        assert set(report[stat]) == keys
    dscs = [r["dsc"] for r in report["folds"]]
    assert report["mean"]["dsc"] == pytest.approx(np.mean(dscs), abs=1e-15)
    assert report["std"]["dsc"] == pytest.approx(np.std(dscs), abs=1e-15)  # population std

    assert set(report["config"]) == {"network", "training", "loss"}
    json.dumps(report)  # must serialize as-is

    # fresh network per fold, init seed offset by the fold index
    assert outcomes[0].net is not outcomes[1].net
    assert [o.net.config.seed for o in outcomes] == [TINY_NET.seed, TINY_NET.seed + 1]
    for o, row in zip(outcomes, report["folds"]):
        assert o.scores["dsc"] == row["dsc"]


def test_cross_validate_validation_sets_partition_the_samples():
    samples = phantom_samples(5, seed=700)
    config = quick_config(max_epochs=1, patience=1, folds=2)
    report, outcomes = cross_validate(TINY_NET, samples, config)
    folds = kfold_split(range(len(samples)), config.folds, config.seed)
    assert sorted(i for f in folds for i in f) == list(range(5))
    assert len(outcomes) == 2


# ---------------------------------------------------------------------------
# trained-model behaviour


def test_low_contrast_nodules_are_no_easier_than_solid_ones(overfit_run):
    net = load_checkpoint(overfit_run.checkpoint)
    solid, ground_glass = [], []
    for i in range(20):
        spec = dict(extent=32, radius=3.0 + (i % 4), seed=9000 + i)
        solid_sample = generate_phantom(PhantomSpec(contrast=0.8, **spec))
        gg_sample = generate_phantom(PhantomSpec(contrast=0.25, **spec))
        solid.append(evaluate(net, [solid_sample])["dsc"])
        ground_glass.append(evaluate(net, [gg_sample])["dsc"])
    assert np.mean(ground_glass) <= np.mean(solid)
