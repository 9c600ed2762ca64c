"""Pixel-level confusion metrics, ROC curves and AUC.

A metric whose denominator is zero is reported as ``None`` (undefined),
never as 0 or 1.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLabels, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    sensitivity: "float | None"
    specificity: "float | None"
    counts: ConfusionCounts
    roc: list = field(default_factory=list)

    def row(self):
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def confusion(pred_probs, mask, threshold=0.5):
    pred_probs = np.asarray(pred_probs)
    mask = np.asarray(mask)
    if pred_probs.shape != mask.shape:
        raise ShapeError(f"prediction {pred_probs.shape} and mask {mask.shape} differ")
    pos = pred_probs >= threshold
    truth = mask > 0
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    tn = int(truth.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num, den):
    return None if den == 0 else num / den


def metrics_from_counts(counts):
    """(accuracy, sensitivity, specificity); any may be ``None`` when undefined."""
    c = counts
    accuracy = _ratio(c.tp + c.tn, c.total)
    sensitivity = _ratio(c.tp, c.tp + c.fn)
    specificity = _ratio(c.tn, c.tn + c.fp)
    return accuracy, sensitivity, specificity


def roc_curve(scores, labels):
    """ROC points as (fpr, tpr, threshold), starting at the +inf sentinel.

    One point per distinct score, so tied scores move the curve in a single
    (possibly diagonal) step.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1) > 0
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs both positive and negative labels")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    tps = np.cumsum(lab)
    fps = np.cumsum(~lab)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [(0.0, 0.0, float("inf"))]
    for i in last:
        points.append((fps[i] / n_neg, tps[i] / n_pos, float(s[i])))
    return points


def auc(roc):
    """Trapezoidal area under a curve from :func:`roc_curve`."""
    fpr = np.array([p[0] for p in roc])
    tpr = np.array([p[1] for p in roc])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_mw(scores, labels):
    """Pairwise Mann-Whitney statistic P(s+ > s-) + P(s+ == s-)/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1) > 0
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels("Mann-Whitney AUC needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def evaluate(probs, masks, threshold=0.5):
    """Full report for a set of probability maps against binary masks."""
    probs = np.asarray(probs, dtype=np.float64)
    masks = np.asarray(masks)
    counts = confusion(probs, masks, threshold)
    accuracy, sensitivity, specificity = metrics_from_counts(counts)
    try:
        roc = roc_curve(probs, masks)
        area = auc(roc)
    except DegenerateLabels:
        roc, area = [], None
    return MetricsReport(area, accuracy, sensitivity, specificity, counts, roc)


def mean_defined(values):
    """Unweighted mean over the defined (non-None) entries, or None."""
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None
