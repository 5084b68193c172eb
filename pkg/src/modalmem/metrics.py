"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX


class ConfusionMatrix:
    """Rows are ground truth, columns prediction; ignore pixels are skipped."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth sizes differ")
        keep = gt != IGNORE_INDEX
        pred, gt = pred[keep], gt[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValueError("label outside class range")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    per_class_iou: np.ndarray
    per_class_acc: np.ndarray
    miou: float

    def as_dict(self) -> dict:
        return {"miou": round(self.miou, 2),
                "iou": [round(float(x), 2) for x in self.per_class_iou],
                "acc": [round(float(x), 2) for x in self.per_class_acc]}


def iou_metrics(cm: ConfusionMatrix, include_absent: bool = True) -> Metrics:
    """Per-class IoU and recall (percent) and mIoU.

    With ``include_absent`` (default) a class that appears in neither
    prediction nor ground truth counts as IoU 0 in the mean; otherwise such
    classes are left out.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, 0.0) * 100.0
        acc = np.where(tp + fn > 0, tp / (tp + fn), 0.0) * 100.0
    if include_absent:
        miou = float(iou.mean()) if iou.size else 0.0
    else:
        occ = union > 0
        miou = float(iou[occ].mean()) if occ.any() else 0.0
    return Metrics(iou, acc, miou)
