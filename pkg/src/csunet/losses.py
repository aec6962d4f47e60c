"""Training losses: soft Dice, cross-entropy, and their weighted sum.

Cross-entropy is the mean over all voxels of ``-sum_c y * log(p_c)`` with
softmax probabilities clamped to [1e-12, 1] before the log. Soft Dice is
batch-global (one ratio over every voxel in the batch)::

    dice = 1 - (2 * sum(p * y) + eps) / (sum(p + y) + eps)

computed on the foreground probability channel. The combined loss is
``dice + ce_weight * ce``; the default weight 0 trains on Dice alone.
"""

from __future__ import annotations

from dataclasses import dataclass
import dataclasses

import numpy as np

from .functional import one_hot, softmax_channels
from .tensor import ShapeError, Tensor


@dataclass
class LossConfig:
    epsilon: float = 1e-5   # dice smoothing
    ce_weight: float = 0.0  # weight of the cross-entropy term
    clamp_min: float = 1e-12

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.ce_weight < 0:
            raise ValueError(f"ce_weight must be >= 0, got {self.ce_weight}")
        if not 0 < self.clamp_min < 1:
            raise ValueError(f"clamp_min must be in (0, 1), got {self.clamp_min}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ValueError(f"loss config must be an object, got {type(d).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown loss config keys: {unknown}")
        return cls(**d).validate()


def _as_constant(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def ce_loss(logits, target_onehot, config=None):
    """Mean cross-entropy over every voxel in the batch.

    ``logits`` (N, C, D, H, W); ``target_onehot`` same shape (constant).
    The gradient w.r.t. logits is (softmax - onehot) / P for P voxels.
    """
    config = config or LossConfig()
    y = _as_constant(target_onehot, logits)
    if y.shape != logits.shape:
        raise ShapeError(f"ce_loss target shape {y.shape} != logits shape {logits.shape}")
    probs = softmax_channels(logits)
    logp = probs.clamp(config.clamp_min, 1.0).log()
    per_voxel = (logp * y).sum(axis=1)  # (N, D, H, W)
    return -per_voxel.mean()


def dice_loss(probs_fg, target_fg, config=None):
    """Batch-global soft Dice loss on foreground probabilities."""
    config = config or LossConfig()
    y = _as_constant(target_fg, probs_fg)
    if y.shape != probs_fg.shape:
        raise ShapeError(f"dice_loss target shape {y.shape} != probs shape {probs_fg.shape}")
    inter = (probs_fg * y).sum()
    denom = (probs_fg + y).sum()
    eps = config.epsilon
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def combined_loss(logits, target_labels, config=None):
    """dice + ce_weight * ce from logits and an integer label volume.

    ``target_labels`` is (N, D, H, W) with values in [0, num_classes);
    foreground for the Dice term is class 1.
    """
    config = config or LossConfig()
    labels = np.asarray(target_labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(
            f"combined_loss labels shape {labels.shape} does not match logits {logits.shape} (N, D, H, W expected)"
        )
    onehot = one_hot(labels.astype(np.int64), logits.shape[1], dtype=logits.dtype)
    probs = softmax_channels(logits)
    loss = dice_loss(probs[:, 1], Tensor(onehot[:, 1]), config)
    if config.ce_weight > 0:
        y = Tensor(onehot)
        logp = probs.clamp(config.clamp_min, 1.0).log()
        ce = -(logp * y).sum(axis=1).mean()
        loss = loss + config.ce_weight * ce
    return loss
