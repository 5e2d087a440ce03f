"""Segmentation metrics, PR/ROC curves, confusion matrices and the Wilcoxon test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, ShapeError, ValidationError

METRICS = ("dice", "precision", "recall", "specificity", "accuracy")


def _ratio(num, den) -> float:
    # 0/0 is vacuously perfect: nothing to find, nothing wrongly flagged
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, tp, fp, fn, tn) -> "SegMetrics":
        return cls(int(tp), int(fp), int(fn), int(tn))

    @property
    def dice(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.fn + self.tn)

    def __add__(self, other: "SegMetrics") -> "SegMetrics":
        return SegMetrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update({m: getattr(self, m) for m in METRICS})
        return d


def seg_metrics(pred, gt, roi) -> SegMetrics:
    """Pixel counts of predicted vs annotated anomalies inside the region of interest."""
    pred, gt, roi = (np.asarray(a).astype(bool) for a in (pred, gt, roi))
    if not pred.shape == gt.shape == roi.shape:
        raise ShapeError(f"shape mismatch: {pred.shape}, {gt.shape}, {roi.shape}")
    if not roi.any():
        raise DegenerateInputError("empty region of interest; metrics undefined")
    p, g = pred[roi], gt[roi]
    tp = np.count_nonzero(p & g)
    fp = np.count_nonzero(p & ~g)
    fn = np.count_nonzero(~p & g)
    tn = np.count_nonzero(~p & ~g)
    return SegMetrics.from_counts(tp, fp, fn, tn)


def summarize(metrics) -> dict:
    """Mean and standard deviation of each metric over volumes."""
    out = {}
    for m in METRICS:
        vals = np.array([getattr(x, m) for x in metrics], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[m] = {"mean": float(vals.mean()), "std": std}
    return out


def format_table(rows) -> str:
    """Text table with one row per ``(name, nu, summary)``; cells read ``mean (std)``."""
    head = f"{'Algorithm (nu)':<22}" + "".join(f"{m.capitalize():>14}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for name, nu, summ in rows:
        cells = "".join(f"{summ[m]['mean']:>7.2f} ({summ[m]['std']:.2f})" for m in METRICS)
        lines.append(f"{f'{name} ({nu:g})':<22}{cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# curves


def pr_curve(metrics_by_nu) -> list:
    """``[(nu, recall, precision), ...]`` ordered by nu."""
    pts = sorted(((float(nu), m.recall, m.precision) for nu, m in metrics_by_nu), key=lambda t: t[0])
    return pts


def pr_area(curve) -> float:
    """Trapezoidal area under precision as a function of recall."""
    pts = sorted((r, p) for _, r, p in curve)
    if len(pts) < 2:
        return 0.0
    r = np.array([p[0] for p in pts])
    p = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels must align")
    if labels.all() or not labels.any():
        raise DegenerateInputError("ROC needs both classes present")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos n_neg); tied pairs count one half."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """False/true positive rates for every distinct threshold, from strict to lenient."""
    scores, labels = _check_binary(scores, labels)
    thr = np.unique(scores)[::-1]
    tpr = [0.0] + [float(np.mean(scores[labels] >= t)) for t in thr]
    fpr = [0.0] + [float(np.mean(scores[~labels] >= t)) for t in thr]
    return np.array(fpr), np.array(tpr), thr


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        raise DegenerateInputError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    return d, ranks


def wilcoxon_signed_rank(a, b, exact_max: int = 20, min_pairs: int = 6) -> float:
    """Two-sided p-value. Exact null distribution for n <= ``exact_max`` nonzero
    differences (mid-ranks for ties), normal approximation with continuity
    correction above."""
    if len(a) != len(b):
        raise ShapeError("paired samples must have equal length")
    d, ranks = _signed_ranks(a, b)
    n = len(d)
    if n < min_pairs:
        raise ValidationError(f"need >= {min_pairs} nonzero differences, got {n}")
    if n <= exact_max:
        r2 = np.rint(2 * ranks).astype(np.int64)  # mid-ranks are multiples of 1/2
        t2 = int(r2[d > 0].sum())
        total = int(r2.sum())
        counts = np.zeros(total + 1, dtype=np.int64)
        counts[0] = 1
        for r in r2:
            counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
        le = int(counts[: t2 + 1].sum())
        ge = int(counts[t2:].sum())
        return min(1.0, 2 * min(le, ge) / 2 ** n)
    t = ranks[d > 0].sum()
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = max(abs(t - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2)))


# --------------------------------------------------------------------------
# confusion


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    classes: tuple

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def as_rows(self) -> list:
        return [[c] + [int(v) for v in row] for c, row in zip(self.classes, self.counts)]


def confusion(predictions, labels, classes=None) -> ConfusionMatrix:
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ShapeError("predictions and labels must have equal length")
    classes = tuple(classes) if classes is not None else tuple(sorted(set(labels) | set(predictions)))
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(predictions, labels):
        if p not in index or t not in index:
            raise ValidationError(f"unknown class {p if p not in index else t!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts, classes)
