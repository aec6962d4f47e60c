"""Training protocol: optimizers, flip augmentation, k-fold CV, early stopping.

Samples are (image, mask) pairs: image (C, D, H, W) float32, mask (D, H, W)
integer labels. Validation dice similarity drives both the best-model snapshot
and the early-stopping counter; the snapshot taken at the best epoch is
restored before ``fit`` returns.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, combined_loss
from .metrics import ConfusionCounts, argmax_labels, confusion_counts, metrics
from .network import ConfigError, build_network
from .tensor import Tensor, no_grad

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-6
    folds: int = 5
    flip_h: bool = True
    flip_w: bool = True
    seed: int = 0
    overfit: bool = False

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        for name in ("batch_size", "max_epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")
        if not isinstance(self.folds, int) or self.folds < 2:
            raise ConfigError(f"folds must be an integer >= 2, got {self.folds!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError(f"training config must be a mapping, got {type(d).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d).validate()


class SGD:
    """Momentum SGD; velocity v = momentum*v + g, step p -= lr*v."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.value.data -= self.lr * v


class Adam:
    """Adam with bias correction; step p -= lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, config):
    if config.optimizer == "adam":
        return Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    if config.optimizer == "sgd":
        return SGD(params, lr=config.lr, momentum=config.momentum)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


def flip_volume(image, mask, flip_h, flip_w):
    """Mirror image (..., H, W) and mask (..., H, W) along the chosen axes."""
    axes = []
    if flip_h:
        axes.append(-2)
    if flip_w:
        axes.append(-1)
    if not axes:
        return image, mask
    return np.flip(image, axis=tuple(axes)), np.flip(mask, axis=tuple(axes))


def augment_flip(image, mask, rng, config):
    """Random mirroring, one coin per enabled axis (H drawn first, then W)."""
    flip_h = config.flip_h and rng.random() < 0.5
    flip_w = config.flip_w and rng.random() < 0.5
    return flip_volume(image, mask, flip_h, flip_w)


def kfold_split(ids, k, seed):
    """Partition ids into k folds from a seeded shuffle.

    Fold sizes differ by at most one; the first ``len(ids) % k`` folds take
    the extra element. Returns a list of k id lists.
    """
    ids = list(ids)
    n = len(ids)
    if k < 2:
        raise ConfigError(f"k-fold split needs k >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append([ids[j] for j in order[start : start + size]])
        start += size
    return folds


class EarlyStopping:
    """Stop after ``patience`` epochs without improvement > ``min_delta``."""

    def __init__(self, patience, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best_value = -math.inf
        self.best_epoch = -1
        self.stale = 0
        self.epoch = -1

    def update(self, value):
        """Record one epoch's monitored value; True iff it is a new best."""
        self.epoch += 1
        if value > self.best_value + self.min_delta:
            self.best_value = value
            self.best_epoch = self.epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self):
        return self.stale >= self.patience


def _stack_batch(samples, dtype):
    images = np.stack([np.ascontiguousarray(s[0], dtype=dtype) for s in samples])
    labels = np.stack([np.ascontiguousarray(s[1]) for s in samples])
    return images, labels


def train_step(net, images, labels, loss_config, optimizer):
    """One optimization step on a stacked batch; returns the loss value."""
    net.zero_grad()
    loss = combined_loss(net(Tensor(images)), labels, loss_config)
    value = loss.item()
    loss.backward()
    optimizer.step()
    return value


def evaluate(net, samples, batch_size=2):
    """Batch-global confusion over ``samples`` in eval mode; returns metrics."""
    net.eval()
    total = ConfusionCounts.zero(net.config.num_classes)
    with no_grad():
        for start in range(0, len(samples), batch_size):
            images, labels = _stack_batch(samples[start : start + batch_size], net.dtype)
            pred = argmax_labels(net(Tensor(images)).data)
            total = total + confusion_counts(pred, labels, net.config.num_classes)
    return metrics(total)


def fit(net, train_samples, val_samples, train_config, loss_config=None, log=None):
    """Train with per-epoch validation, early stopping and best-state restore.

    Returns a dict with ``history`` (one row per epoch), ``best_epoch``,
    ``best_val_dsc`` and ``epochs_run``. The network is left holding the
    parameters of its best validation epoch.
    """
    train_config.validate()
    loss_config = (loss_config or LossConfig()).validate()
    if not train_samples:
        raise ConfigError("fit needs at least one training sample")
    if not val_samples:
        raise ConfigError("fit needs at least one validation sample")

    rng = np.random.default_rng(train_config.seed)
    optimizer = make_optimizer(net.parameters(), train_config)
    stopper = EarlyStopping(train_config.patience, train_config.min_delta)
    best_state = None
    history = []

    for epoch in range(train_config.max_epochs):
        net.train()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            chosen = order[start : start + train_config.batch_size]
            batch = [augment_flip(*train_samples[i], rng, train_config) for i in chosen]
            images, labels = _stack_batch(batch, net.dtype)
            losses.append(train_step(net, images, labels, loss_config, optimizer))

        scores = evaluate(net, val_samples, train_config.batch_size)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_dsc": scores["dsc"],
            "val_sen": scores["sen"],
            "val_pre": scores["pre"],
            "val_miou": scores["miou"],
        }
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  val dsc {row['val_dsc']:.4f}")
        if stopper.update(scores["dsc"]):
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
        if stopper.should_stop:
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    return {
        "history": history,
        "best_epoch": stopper.best_epoch,
        "best_val_dsc": stopper.best_value,
        "epochs_run": len(history),
    }


@dataclass
class FoldOutcome:
    fold: int
    net: object
    result: dict
    scores: dict


def cross_validate(net_config, samples, train_config, loss_config=None, log=None):
    """K-fold cross-validation; returns (report, fold outcomes).

    Each fold trains a freshly initialized network (init seed offset by the
    fold index) on the other folds and validates on the held-out one. The
    report carries per-fold metrics plus their mean and population std, and
    embeds the resolved configuration.
    """
    train_config.validate()
    loss_config = (loss_config or LossConfig()).validate()
    folds = kfold_split(range(len(samples)), train_config.folds, train_config.seed)
    outcomes = []
    keys = ("sen", "dsc", "pre", "miou")
    rows = []
    for k, held_out in enumerate(folds):
        val = [samples[i] for i in held_out]
        train = [samples[i] for i in sorted(set(range(len(samples))) - set(held_out))]
        fold_net_config = dataclasses.replace(net_config, seed=net_config.seed + k)
        net = build_network(fold_net_config)
        if log is not None:
            log(f"fold {k}: {len(train)} train / {len(val)} val")
        result = fit(net, train, val, train_config, loss_config, log=log)
        scores = evaluate(net, val, train_config.batch_size)
        outcomes.append(FoldOutcome(k, net, result, scores))
        rows.append({"fold": k, **{m: scores[m] for m in keys}})

    report = {
        "folds": rows,
        "mean": {m: float(np.mean([r[m] for r in rows])) for m in keys},
        "std": {m: float(np.std([r[m] for r in rows])) for m in keys},
        "config": {
            "network": net_config.to_dict(),
            "training": train_config.to_dict(),
            "loss": loss_config.to_dict(),
        },
    }
    return report, outcomes
