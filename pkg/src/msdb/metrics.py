"""Confusion-matrix accumulation, mean pixel accuracy and mean IoU.

Class averages run over classes that occur in the ground truth (``t_i > 0``);
the per-class formulas are undefined elsewhere.
"""
from __future__ import annotations

import json

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "confusion_update",
    "format_report",
    "mean_accuracy",
    "mean_iou",
]


class ConfusionMatrix:
    """``counts[i, j]`` = pixels of ground-truth class ``i`` predicted as ``j``."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError("confusion counts must be a non-negative C×C matrix")
        self.counts = counts

    def update(self, gt, pred) -> "ConfusionMatrix":
        gt, pred = np.asarray(gt), np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        c = self.num_classes
        for name, arr in (("gt", gt), ("pred", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValueError(f"{name} ids must lie in [0, {c})")
        idx = gt.reshape(-1).astype(np.int64) * c + pred.reshape(-1).astype(np.int64)
        self.counts = self.counts + np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def _present(self) -> np.ndarray:
        present = self.totals > 0
        if not present.any():
            raise ValueError("confusion matrix is empty")
        return present

    def per_class_accuracy(self) -> np.ndarray:
        t = self.totals
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(t > 0, np.diag(self.counts) / t, np.nan)

    def per_class_iou(self) -> np.ndarray:
        t = self.totals
        diag = np.diag(self.counts)
        union = t + self.counts.sum(axis=0) - diag
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(t > 0, diag / union, np.nan)

    def mean_accuracy(self) -> float:
        present = self._present()
        return float(self.per_class_accuracy()[present].mean())

    def mean_iou(self) -> float:
        present = self._present()
        return float(self.per_class_iou()[present].mean())

    def report(self) -> dict:
        return {
            "mean_iou": self.mean_iou(),
            "mean_accuracy": self.mean_accuracy(),
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou()],
            "per_class_accuracy": [
                None if np.isnan(v) else float(v) for v in self.per_class_accuracy()
            ],
            "pixel_totals": [int(v) for v in self.totals],
            "total_pixels": int(self.counts.sum()),
        }


def _as_matrix(m) -> ConfusionMatrix:
    if isinstance(m, ConfusionMatrix):
        return m
    m = np.asarray(m)
    return ConfusionMatrix(m.shape[0], m)


def confusion_update(m: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    return m.update(gt, pred)


def mean_accuracy(m) -> float:
    return _as_matrix(m).mean_accuracy()


def mean_iou(m) -> float:
    return _as_matrix(m).mean_iou()


def format_report(report: dict, fmt: str = "text", class_names=None) -> str:
    """Render a metrics report as aligned text or JSON."""
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True)
    names = class_names or [f"class_{i}" for i in range(len(report["per_class_iou"]))]
    lines = [
        f"mean_iou        {report['mean_iou']:.4f}",
        f"mean_accuracy   {report['mean_accuracy']:.4f}",
        f"total_pixels    {report['total_pixels']}",
        f"{'class':<16}{'iou':>8}{'acc':>8}{'pixels':>10}",
    ]
    for name, iou, acc, tot in zip(names, report["per_class_iou"],
                                   report["per_class_accuracy"], report["pixel_totals"]):
        fi = "-" if iou is None else f"{iou:.4f}"
        fa = "-" if acc is None else f"{acc:.4f}"
        lines.append(f"{name:<16}{fi:>8}{fa:>8}{tot:>10}")
    return "\n".join(lines)
