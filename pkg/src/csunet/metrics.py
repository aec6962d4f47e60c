"""Hard-label evaluation metrics from accumulated confusion counts.

Foreground (class 1) counts give sensitivity, precision and DSC; per-class
intersection/union tallies give mean IoU over all classes. The empty-class
convention everywhere: if a metric's denominator is empty, the metric is 1.0
when the class is absent from both prediction and target, else 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    intersections: tuple  # per class
    unions: tuple         # per class

    @staticmethod
    def zero(num_classes=2):
        return ConfusionCounts(0, 0, 0, 0, (0,) * num_classes, (0,) * num_classes)

    def __add__(self, other):
        if len(self.intersections) != len(other.intersections):
            raise ValueError("cannot merge counts with different class counts")
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
            tuple(a + b for a, b in zip(self.intersections, other.intersections)),
            tuple(a + b for a, b in zip(self.unions, other.unions)),
        )


def argmax_labels(class_values):
    """Channel argmax of (N, C, ...) arrays; ties go to the lower class index."""
    arr = class_values.data if hasattr(class_values, "data") else np.asarray(class_values)
    return np.argmax(arr, axis=1)


def confusion_counts(pred_labels, target_labels, num_classes=2):
    """Tally counts from two integer label volumes of identical shape."""
    pred = np.asarray(pred_labels)
    target = np.asarray(target_labels)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    pred_fg = pred == 1
    target_fg = target == 1
    tp = int(np.count_nonzero(pred_fg & target_fg))
    fp = int(np.count_nonzero(pred_fg & ~target_fg))
    fn = int(np.count_nonzero(~pred_fg & target_fg))
    tn = int(pred.size - tp - fp - fn)
    inters = []
    unions = []
    for c in range(num_classes):
        pc = pred == c
        tc = target == c
        inters.append(int(np.count_nonzero(pc & tc)))
        unions.append(int(np.count_nonzero(pc | tc)))
    return ConfusionCounts(tp, fp, fn, tn, tuple(inters), tuple(unions))


def _ratio(num, den, absent):
    if den == 0:
        return 1.0 if absent else 0.0
    return num / den


def metrics(counts: ConfusionCounts):
    """sen / pre / dsc on foreground plus miou over all classes, as floats."""
    fg_absent = counts.tp + counts.fp + counts.fn == 0
    sen = _ratio(counts.tp, counts.tp + counts.fn, fg_absent)
    pre = _ratio(counts.tp, counts.tp + counts.fp, fg_absent)
    dsc = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, fg_absent)
    ious = [_ratio(i, u, u == 0) for i, u in zip(counts.intersections, counts.unions)]
    return {"sen": sen, "pre": pre, "dsc": dsc, "miou": float(np.mean(ious))}
