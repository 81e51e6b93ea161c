"""Confusion matrices, per-class F1 and the 8-class macro F1.

Scores are computed from integer counts with exact rational arithmetic and
rounded to float once, so results do not depend on summation order.
Precision, recall and F1 are 0 whenever their denominator is 0, and the
macro average always divides by 8, absent classes included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._io import atomic_write_text
from .errors import InputError

NUM_CLASSES = 8
IGNORE_INDEX = -1


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


class ConfusionMatrix:
    """8x8 counts; rows are true classes, columns predicted classes."""

    def __init__(self, counts=None):
        if counts is None:
            counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES) or (counts < 0).any():
            raise InputError("confusion counts must be a nonnegative 8x8 integer matrix")
        self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, true_labels, predicted_labels, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        """Add one count per non-ignored (true, predicted) pair, in place."""
        t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
        p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
        if t.shape != p.shape:
            raise InputError(f"label arrays differ in length: {t.size} vs {p.size}")
        keep = t != ignore_index
        t, p = t[keep], p[keep]
        if ((t < 0) | (t >= NUM_CLASSES)).any():
            raise InputError("true label out of range 0..7")
        if ((p < 0) | (p >= NUM_CLASSES)).any():
            raise InputError("predicted label out of range 0..7")
        np.add.at(self.counts, (t, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def update_confusion(cm: ConfusionMatrix, true_labels, predicted_labels,
                     ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return cm.update(true_labels, predicted_labels, ignore_index)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def macro_f1(cm: ConfusionMatrix) -> tuple[float, list[ClassScore]]:
    c = cm.counts
    f1s, scores = [], []
    for k in range(NUM_CLASSES):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        f1s.append(f1)
        scores.append(ClassScore(
            precision=float(_ratio(tp, tp + fp)),
            recall=float(_ratio(tp, tp + fn)),
            f1=float(f1),
            support=tp + fn,
        ))
    return float(sum(f1s) / NUM_CLASSES), scores


def metrics_report(cm: ConfusionMatrix, class_names=None) -> dict:
    from .data import LABEL_NAMES

    names = class_names or LABEL_NAMES
    macro, scores = macro_f1(cm)
    return {
        "macro_f1": macro,
        "frames": cm.total,
        "classes": [
            {"code": k, "name": names[k], "precision": s.precision, "recall": s.recall,
             "f1": s.f1, "support": s.support}
            for k, s in enumerate(scores)
        ],
        "confusion": cm.counts.tolist(),
    }


def write_metrics_report(path, cm: ConfusionMatrix) -> dict:
    report = metrics_report(cm)
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
