"""Confusion matrices and per-class / support-weighted F1 scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import ALL_LABELS, Label

__all__ = ["ConfusionMatrix", "confusion", "per_class_f1", "weighted_f1"]


@dataclass
class ConfusionMatrix:
    """Square count matrix indexed [gold][predicted] over an ordered class list."""

    classes: tuple[Label, ...]
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise ValueError(f"counts must be {c}x{c}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(
    golds: Sequence[Label],
    preds: Sequence[Label],
    classes: Optional[Sequence[Label]] = None,
) -> ConfusionMatrix:
    """Accumulate gold/predicted label pairs into a confusion matrix.

    ``classes`` fixes the row/column order; it defaults to the canonical
    five-class list.
    """
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} golds vs {len(preds)} predictions")
    classes = tuple(classes) if classes is not None else ALL_LABELS
    index = {label: i for i, label in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(golds, preds):
        if g not in index or p not in index:
            raise ValueError(f"label outside the class list: gold={g}, pred={p}")
        counts[index[g], index[p]] += 1
    return ConfusionMatrix(classes=classes, counts=counts)


def per_class_f1(cm: ConfusionMatrix) -> dict[Label, float]:
    """One-vs-rest F1 per class; a class with zero precision and recall
    scores 0 by convention."""
    out: dict[Label, float] = {}
    for i, label in enumerate(cm.classes):
        tp = float(cm.counts[i, i])
        fp = float(cm.counts[:, i].sum()) - tp
        fn = float(cm.counts[i, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall > 0:
            out[label] = 2.0 * precision * recall / (precision + recall)
        else:
            out[label] = 0.0
    return out


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1 (weights = gold counts / total).

    Coincides with macro-F1 when the gold supports are balanced.
    """
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    f1s = per_class_f1(cm)
    supports = cm.counts.sum(axis=1)
    return float(sum(
        (supports[i] / total) * f1s[label] for i, label in enumerate(cm.classes)
    ))
