"""Hard-label overlap metrics and their CSV report.

A class absent from both prediction and target scores 1 on DSC, IoU and
recall; this keeps empty classes from dragging means toward zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CSV_HEADER = ("class", "DSC", "IoU", "recall", "T/W")


@dataclass
class SegmentationMetrics:
    dsc: np.ndarray        # per class, background first
    iou: np.ndarray
    recall: np.ndarray
    tw: np.ndarray         # per-class target voxels / total voxels
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.dsc)

    @property
    def mean_dsc(self) -> float:
        """Mean DSC over foreground classes."""
        return float(self.dsc[1:].mean())

    @property
    def miou(self) -> float:
        return float(self.iou[1:].mean())

    @property
    def mean_recall(self) -> float:
        return float(self.recall[1:].mean())

    def rows(self) -> list:
        out = [(str(c), self.dsc[c], self.iou[c], self.recall[c], self.tw[c])
               for c in range(self.num_classes)]
        out.append(("mean", self.mean_dsc, self.miou, self.mean_recall,
                    float(self.tw[1:].sum())))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, *vals in self.rows():
            w.writerow([name] + [f"{v:.6f}" for v in vals])
        return buf.getvalue()


def _ratio(num, den):
    return np.where(den > 0, num / np.where(den > 0, den, 1), 1.0)


def confusion(pred, target, num_classes: int):
    """Hard per-class TP, FP, FN counts."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    joint = np.bincount(target.ravel().astype(np.int64) * num_classes + pred.ravel(),
                        minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(joint).astype(np.float64)
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    return tp, fp, fn


def metrics(pred, target, num_classes: int) -> SegmentationMetrics:
    """DSC, IoU, recall and T/W per class from integer label volumes."""
    tp, fp, fn = confusion(pred, target, num_classes)
    return from_counts(tp, fp, fn, np.asarray(target).size)


def from_counts(tp, fp, fn, total: int) -> SegmentationMetrics:
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    return SegmentationMetrics(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        recall=_ratio(tp, tp + fn),
        tw=(tp + fn) / max(total, 1),
        tp=tp, fp=fp, fn=fn,
    )


def target_ratio(labels) -> float:
    """Foreground (non-zero label) voxels over all voxels."""
    labels = np.asarray(labels)
    return float(np.count_nonzero(labels)) / labels.size
