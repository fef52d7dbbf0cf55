"""Binary classification metrics, PR sweeps, and regression error.

Conventions are fixed here once so every consumer agrees: predictions
are score >= threshold; precision with zero predicted positives is 1.0
when there are also no actual positives, else 0.0, with the degenerate
case flagged; ROC-AUC is the rank statistic with tie-averaging.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    error_rate: float
    rmse: float | None = None
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)
    degenerate_precision: bool = False

    def rows(self):
        out = [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("roc_auc", self.roc_auc),
            ("error_rate", self.error_rate),
        ]
        if self.rmse is not None:
            out.append(("rmse", self.rmse))
        return out


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ShapeError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion_counts(scores, labels, threshold):
    scores, labels = _validate(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, fn, tn


def precision_recall(tp, fp, fn):
    """Precision/recall with the documented zero-denominator conventions."""
    degenerate = (tp + fp) == 0
    if degenerate:
        precision = 1.0 if (tp + fn) == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
    return precision, recall, degenerate


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC with average ranks on ties; 0.5 if one class."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold: float = 0.0) -> MetricsReport:
    scores, labels = _validate(scores, labels)
    tp, fp, fn, tn = confusion_counts(scores, labels, threshold)
    precision, recall, degenerate = precision_recall(tp, fp, fn)
    accuracy = (tp + tn) / labels.size if labels.size else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        roc_auc=roc_auc(scores, labels),
        error_rate=1.0 - accuracy,
        pr_curve=pr_curve(scores, labels) if labels.sum() else [],
        degenerate_precision=degenerate,
    )


def pr_curve(scores, labels, total_positives: int | None = None):
    """(threshold, precision, recall) at every distinct score, descending.

    total_positives overrides the recall denominator; use it when some
    actual positives never received a score (they count as misses at
    every threshold).
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    denom = n_pos if total_positives is None else int(total_positives)
    if denom <= 0:
        raise ShapeError("pr_curve needs at least one positive label")
    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        tp, fp, fn, _ = confusion_counts(scores, labels, t)
        precision, _, _ = precision_recall(tp, fp, fn)
        recall = tp / denom
        points.append((float(t), float(precision), float(recall)))
    return points


def best_f1(curve) -> float:
    """Max F1 over a PR sweep."""
    best = 0.0
    for _, p, r in curve:
        if p + r > 0:
            best = max(best, 2 * p * r / (p + r))
    return best


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ShapeError("rmse shapes differ")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def metrics_to_csv(reports: dict[str, MetricsReport]) -> str:
    """One row per (split, metric, value)."""
    buf = io.StringIO()
    buf.write("split,metric,value\n")
    for split_name, report in reports.items():
        for name, value in report.rows():
            buf.write(f"{split_name},{name},{value!r}\n")
    return buf.getvalue()


def pr_curve_to_csv(curve) -> str:
    buf = io.StringIO()
    buf.write("threshold,precision,recall\n")
    for t, p, r in curve:
        buf.write(f"{t!r},{p!r},{r!r}\n")
    return buf.getvalue()
