"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .losses import IGNORE_INDEX


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    iou: np.ndarray  # per class, NaN where excluded
    acc: np.ndarray
    f1: np.ndarray
    present: np.ndarray
    miou: float
    macc: float
    mf1: float
    pixel_acc: float

    def as_dict(self):
        return {
            "mIoU": self.miou,
            "mAcc": self.macc,
            "F1": self.mf1,
            "Acc": self.pixel_acc,
            "IoU": [None if np.isnan(v) else float(v) for v in self.iou],
            "ClassAcc": [None if np.isnan(v) else float(v) for v in self.acc],
        }


def confusion_matrix(pred, truth, num_classes, ignore_index=IGNORE_INDEX):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    valid = truth != ignore_index
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ShapeError(f"truth labels outside [0, {num_classes})")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ShapeError(f"predicted labels outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(cm, absent="exclude"):
    """Per-class and mean metrics; ``absent`` is ``"exclude"`` or ``"zero"``.

    Means run over the classes present in the truth. A class missing from the
    truth gets NaN per-class entries and, with ``absent="exclude"``, is left
    out of the means; ``absent="zero"`` scores it as 0 instead.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    fp = predicted - tp
    fn = support - tp
    present = support > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        acc = np.where(present, tp / support, np.nan)
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    if absent not in ("exclude", "zero"):
        raise ValueError(f"absent must be 'exclude' or 'zero', got {absent!r}")

    def avg(v):
        if absent == "zero":
            return float(np.nan_to_num(v, nan=0.0).mean())
        v = v[~np.isnan(v)]
        return float(v.mean()) if v.size else float("nan")

    total = cm.sum()
    return MetricsReport(
        confusion=cm,
        iou=iou,
        acc=acc,
        f1=f1,
        present=present,
        miou=avg(iou),
        macc=avg(acc),
        mf1=avg(f1),
        pixel_acc=float(tp.sum() / total) if total else float("nan"),
    )


def evaluate(pred, truth, num_classes, ignore_index=IGNORE_INDEX, absent="exclude"):
    """Metrics for one label map or a stack of them; ignored truth pixels are skipped."""
    return report_from_confusion(confusion_matrix(pred, truth, num_classes, ignore_index), absent)
