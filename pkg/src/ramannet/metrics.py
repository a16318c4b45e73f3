"""Classification metrics: confusion matrix, binary rates, top-k accuracy.

Rates with a zero denominator are returned as ``None`` ("undefined"), never 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LabelError, ShapeError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [C x C], rows = true class, columns = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float | None:
        return None if self.total == 0 else float(np.trace(self.counts) / self.total)


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeError(f"label vectors differ: {t.shape} vs {p.shape}")
    for name, v in (("true", t), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise LabelError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity, "specificity": self.specificity}


def _ratio(num, den):
    return None if den == 0 else float(num / den)


def binary_metrics(cm: ConfusionMatrix, positive_class: int = 1) -> BinaryMetrics:
    if cm.num_classes != 2:
        raise ConfigError(f"binary metrics need a 2x2 confusion matrix, got {cm.num_classes} classes")
    if positive_class not in (0, 1):
        raise LabelError(f"positive_class must be 0 or 1, got {positive_class}")
    neg = 1 - positive_class
    c = cm.counts
    tp, fn = c[positive_class, positive_class], c[positive_class, neg]
    tn, fp = c[neg, neg], c[neg, positive_class]
    return BinaryMetrics(
        accuracy=_ratio(tp + tn, c.sum()),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
    )


def topk_accuracy(logits, labels, ks) -> dict[int, float]:
    """Fraction of rows whose true class ranks within the top k.

    Equal scores rank the lower class index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, c = logits.shape
    for k in ks:
        if not 1 <= k <= c:
            raise ConfigError(f"k must lie in [1, {c}], got {k}")
    if n == 0:
        return {int(k): None for k in ks}
    true_score = logits[np.arange(n), labels][:, None]
    cols = np.arange(c)[None, :]
    rank = ((logits > true_score) | ((logits == true_score) & (cols < labels[:, None]))).sum(axis=1)
    return {int(k): float((rank < k).mean()) for k in ks}


def write_confusion_csv(cm: ConfusionMatrix, class_names, path) -> None:
    names = list(class_names)
    if len(names) != cm.num_classes:
        raise ShapeError(f"{len(names)} class names for a {cm.num_classes}-class matrix")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted"] + names)
        for name, row in zip(names, cm.counts):
            w.writerow([name] + [int(v) for v in row])
