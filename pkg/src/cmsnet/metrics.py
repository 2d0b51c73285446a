"""Confusion-matrix accumulation and the segmentation metric suite.

Notation: ``n[i, j]`` counts pixels of true class ``i`` predicted as ``j``;
``t_i`` is the row sum (ground-truth pixels of class ``i``).

    P_acc  = sum_i n_ii / sum_i t_i
    CP_acc = n_ii / t_i
    mCP_acc = mean_i CP_acc(i)
    IoU_i  = n_ii / (t_i + sum_j n_ji - n_ii)
    mIoU   = mean_i IoU_i
    FWIoU  = (sum_k t_k)^-1 sum_i t_i IoU_i

Classes absent from both ground truth and prediction are left out of the
means (their IoU is 0/0); classes with ``t_i = 0`` are left out of mCP_acc.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import ConfigError, DataError, MetricError


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
            raise ConfigError("counts must be a nonnegative CxC integer matrix")
        self.counts = counts

    def accumulate(self, gt: np.ndarray, pred: np.ndarray, ignore_id: int | None = None) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ConfigError(f"mask shapes differ: gt {gt.shape} vs pred {pred.shape}")
        valid = np.ones(gt.shape, bool) if ignore_id is None else gt != ignore_id
        c = self.num_classes
        for name, m in (("ground truth", gt), ("prediction", pred)):
            bad = valid & ((m < 0) | (m >= c))
            if bad.any():
                loc = tuple(int(v) for v in np.argwhere(bad)[0])
                raise DataError(f"{name} pixel {loc} has class {int(m[loc])} outside [0, {c})")
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require(self):
        if self.total == 0:
            raise MetricError("metrics are undefined for an empty confusion matrix")

    def _parts(self):
        self._require()
        diag = np.diag(self.counts).astype(np.float64)
        t = self.counts.sum(axis=1).astype(np.float64)
        pred = self.counts.sum(axis=0).astype(np.float64)
        return diag, t, pred

    def pixel_accuracy(self) -> float:
        diag, t, _ = self._parts()
        return float(diag.sum() / t.sum())

    def class_pixel_accuracy(self, i: int) -> float:
        diag, t, _ = self._parts()
        return float(diag[i] / t[i]) if t[i] else float("nan")

    def mean_accuracy(self) -> float:
        diag, t, _ = self._parts()
        present = t > 0
        return float(np.sum(diag[present] / t[present]) / present.sum())

    def iou(self, i: int) -> float:
        diag, t, pred = self._parts()
        union = t[i] + pred[i] - diag[i]
        return float(diag[i] / union) if union else float("nan")

    def ious(self) -> np.ndarray:
        diag, t, pred = self._parts()
        union = t + pred - diag
        out = np.full(self.num_classes, np.nan)
        np.divide(diag, union, out=out, where=union > 0)
        return out

    def miou(self) -> float:
        ious = self.ious()
        present = ~np.isnan(ious)
        return float(np.sum(ious[present]) / present.sum())

    def fwiou(self) -> float:
        _, t, _ = self._parts()
        ious = self.ious()
        present = t > 0
        return float(np.sum(t[present] * ious[present]) / t.sum())

    def summary(self) -> dict[str, float]:
        return {
            "p_acc": self.pixel_accuracy(),
            "mcp_acc": self.mean_accuracy(),
            "miou": self.miou(),
            "fwiou": self.fwiou(),
        }


def confusion_matrix(gt, pred, num_classes: int, ignore_id: int | None = None) -> ConfusionMatrix:
    return ConfusionMatrix(num_classes).accumulate(gt, pred, ignore_id)


def accumulate(cm: ConfusionMatrix, gt, pred, ignore_id: int | None = None) -> ConfusionMatrix:
    return cm.accumulate(gt, pred, ignore_id)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    return cm.pixel_accuracy()


def class_pixel_accuracy(cm: ConfusionMatrix, i: int) -> float:
    return cm.class_pixel_accuracy(i)


def mean_accuracy(cm: ConfusionMatrix) -> float:
    return cm.mean_accuracy()


def iou(cm: ConfusionMatrix, i: int) -> float:
    return cm.iou(i)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def fwiou(cm: ConfusionMatrix) -> float:
    return cm.fwiou()


def per_image_miou(pairs, num_classes: int, ignore_id: int | None = None) -> float:
    """Mean over images of each image's own mIoU (the per-image reporting mode)."""
    vals = [confusion_matrix(g, p, num_classes, ignore_id).miou() for g, p in pairs]
    if not vals:
        raise MetricError("no images to evaluate")
    return float(np.mean(vals))


def write_report(cm: ConfusionMatrix, path, class_names=None) -> None:
    """CSV rows ``class,iou,cp_acc`` plus two summary rows.

    ``mean`` carries mIoU and mCP_acc; ``weighted`` carries FWIoU and P_acc
    (pixel accuracy is the frequency-weighted mean of CP_acc).
    """
    names = class_names or [str(i) for i in range(cm.num_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou", "cp_acc"])
        for i, name in enumerate(names):
            w.writerow([name, _fmt(cm.iou(i)), _fmt(cm.class_pixel_accuracy(i))])
        s = cm.summary()
        w.writerow(["mean", _fmt(s["miou"]), _fmt(s["mcp_acc"])])
        w.writerow(["weighted", _fmt(s["fwiou"]), _fmt(s["p_acc"])])


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"
