"""Confusion matrices, accuracy and IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyMatrix, IndexOutOfRange


class ConfusionMatrix:
    """k x k counts; rows are ground truth, columns predictions."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("need at least one class")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def accumulate(self, gt: int, pred: int) -> "ConfusionMatrix":
        if not (0 <= gt < self.k and 0 <= pred < self.k):
            raise IndexOutOfRange(f"class index outside [0, {self.k}): gt={gt}, pred={pred}")
        self.counts[gt, pred] += 1
        return self

    def accumulate_many(self, gts: Iterable[int], preds: Iterable[int]) -> "ConfusionMatrix":
        gts = np.asarray(list(gts), dtype=np.int64)
        preds = np.asarray(list(preds), dtype=np.int64)
        if gts.shape != preds.shape:
            raise ValueError("gt and pred lengths differ")
        if gts.size and (gts.min() < 0 or preds.min() < 0 or gts.max() >= self.k or preds.max() >= self.k):
            raise IndexOutOfRange(f"class index outside [0, {self.k})")
        np.add.at(self.counts, (gts, preds), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ValueError("cannot merge matrices of different sizes")
        out = ConfusionMatrix(self.k)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _check(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no samples")


def accuracy(cm: ConfusionMatrix) -> float:
    _check(cm)
    return float(np.trace(cm.counts)) / cm.total


def _tp_fp_fn(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return tp, fp, fn


def iou(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP + FN) for class ``c``; nan when the class never occurs."""
    _check(cm)
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp[c] + fp[c] + fn[c]
    return float(tp[c] / denom) if denom > 0 else float("nan")


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    _check(cm)
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp + fp + fn
    out = np.full(cm.k, np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in ground truth or predictions."""
    vals = per_class_iou(cm)
    return float(np.mean(vals[~np.isnan(vals)]))


@dataclass(frozen=True)
class MetricsReport:
    task: str
    accuracy: float
    miou: float
    per_class_iou: dict
    support: dict

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "support": self.support,
        }


def report(task: str, cm: ConfusionMatrix, class_names: Sequence[str], acc: Optional[float] = None) -> MetricsReport:
    """Build a report; ``acc`` overrides the micro accuracy (e.g. macro averaging)."""
    ious = per_class_iou(cm)
    support = cm.counts.sum(axis=1)
    return MetricsReport(
        task=task,
        accuracy=accuracy(cm) if acc is None else acc,
        miou=miou(cm),
        per_class_iou={n: (None if np.isnan(v) else float(v)) for n, v in zip(class_names, ious)},
        support={n: int(s) for n, s in zip(class_names, support)},
    )
