"""Segmentation and melanoma-recognition metrics used by the ISIC challenges.

Conventions for degenerate inputs:

* empty prediction and empty ground truth: JA = DI = 1, and sensitivity is
  taken as 1 for GM (nothing to find, nothing missed);
* a sensitivity/specificity whose denominator is zero is ``nan`` (undefined)
  and is skipped by :func:`mean_ignoring_nan`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ConfusionCounts",
    "RocCurve",
    "confusion",
    "seg_metrics",
    "cls_metrics",
    "roc_auc",
    "mean_ignoring_nan",
    "SEG_METRICS",
    "CLS_METRICS",
]

SEG_METRICS = ("JA", "DI", "AC_s", "GM")
CLS_METRICS = ("AUC", "AC_r", "SE", "SP")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = [f"# auc={self.auc!r}", "fpr,tpr"]
        lines += [f"{f!r},{t!r}" for f, t in zip(self.fpr.tolist(), self.tpr.tolist())]
        return "\n".join(lines) + "\n"


def confusion(pred, gt) -> ConfusionCounts:
    """Counts with the lesion / melanoma class (truthy values) as positive."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else math.nan


def seg_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Jaccard, Dice, pixel accuracy and the mean of sensitivity/specificity."""
    overlap_den = c.tp + c.fn + c.fp
    if overlap_den == 0:
        ja = di = 1.0
    else:
        ja = c.tp / overlap_den
        di = 2 * c.tp / (2 * c.tp + c.fn + c.fp)
    ac = (c.tp + c.tn) / c.total if c.total else math.nan
    sensitivity = _ratio(c.tp, c.tp + c.fn)
    specificity = _ratio(c.tn, c.tn + c.fp)
    if math.isnan(sensitivity) and c.fp == 0:
        sensitivity = 1.0
    if math.isnan(specificity):
        gm = sensitivity
    elif math.isnan(sensitivity):
        gm = specificity
    else:
        gm = (sensitivity + specificity) / 2
    return {"JA": ja, "DI": di, "AC_s": ac, "GM": gm}


def cls_metrics(pred_labels: Sequence[int], gt_labels: Sequence[int]) -> dict[str, float]:
    """Accuracy, sensitivity (melanoma recall) and specificity."""
    p = np.asarray(pred_labels).astype(int)
    g = np.asarray(gt_labels).astype(int)
    if p.shape != g.shape:
        raise ValueError(f"{p.size} predictions for {g.size} labels")
    if p.size == 0:
        raise ValueError("cls_metrics needs at least one case")
    c = confusion(p == 1, g == 1)
    return {
        "AC_r": (c.tp + c.tn) / c.total,
        "SE": _ratio(c.tp, c.tp + c.fn),
        "SP": _ratio(c.tn, c.tn + c.fp),
    }


def roc_auc(scores: Sequence[float], gt_labels: Sequence[int]) -> RocCurve:
    """ROC from a sweep over the distinct scores (descending); trapezoidal AUC.

    Equal scores form a single threshold step, so ties contribute half weight.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(gt_labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[last_of_group] / n_pos]
    fpr = np.r_[0.0, fps[last_of_group] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


def mean_ignoring_nan(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else math.nan
