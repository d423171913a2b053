"""ROC-AUC, confusion metrics and fold aggregation."""
import warnings
from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def roc_auc_binary(scores, labels):
    """Mann-Whitney U / (n_pos * n_neg) with ties counted one half.

    Computed from midranks, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # midranks over runs of equal scores
    start = np.r_[0, np.flatnonzero(np.diff(ss)) + 1]
    end = np.r_[start[1:], s.size]
    mid = (start + end + 1) / 2.0
    ranks[order] = np.repeat(mid, end - start)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_multiclass(scores, labels, average="macro"):
    """One-vs-rest AUC averaged over the classes present in ``labels``.

    ``average`` is "macro" (unweighted) or "weighted" (by class prevalence).
    """
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    C = p.shape[1]
    aucs, support = [], []
    for c in range(C):
        pos = y == c
        if not pos.any():
            warnings.warn(f"class {c} absent from labels; skipped in one-vs-rest AUC", stacklevel=2)
            continue
        if pos.all():
            continue
        aucs.append(roc_auc_binary(p[:, c], pos))
        support.append(pos.sum())
    if len(aucs) == 0 or len(np.unique(y)) < 2:
        raise UndefinedMetricError("multiclass AUC needs at least two classes present")
    if average == "weighted":
        return float(np.average(aucs, weights=support))
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    return float(np.mean(aucs))


def roc_auc(scores, labels):
    """Binary AUC on the positive-class column for 2 classes, macro OvR otherwise."""
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim == 2 and p.shape[1] == 2:
        return roc_auc_binary(p[:, 1], np.asarray(labels) == 1)
    if p.ndim == 1:
        return roc_auc_binary(p, labels)
    return roc_auc_multiclass(p, labels)


@dataclass
class ConfusionMetrics:
    accuracy: float
    sensitivity: float
    specificity: float


def confusion_metrics(scores, labels, positive=1, threshold=None):
    """Accuracy over all samples; sensitivity/specificity for ``positive``.

    Predictions are the row argmax, or ``score[:, positive] >= threshold``
    when a threshold is given.
    """
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if p.ndim == 1:
        pred = p.astype(np.int64)
    elif threshold is not None:
        rest = [c for c in range(p.shape[1]) if c != positive]
        pred = np.where(p[:, positive] >= threshold, positive, np.array(rest)[np.argmax(p[:, rest], axis=1)])
    else:
        pred = np.argmax(p, axis=1)
    pos = y == positive
    if not pos.any():
        raise UndefinedMetricError("sensitivity undefined: no positive samples")
    if pos.all():
        raise UndefinedMetricError("specificity undefined: no negative samples")
    tp = np.sum(pred[pos] == positive)
    tn = np.sum(pred[~pos] != positive)
    return ConfusionMetrics(
        accuracy=float(np.mean(pred == y)),
        sensitivity=float(tp / pos.sum()),
        specificity=float(tn / (~pos).sum()),
    )


def aggregate_folds(values):
    """(mean, population std) of per-fold values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list")
    return float(v.mean()), float(v.std())


def format_cell(values):
    mean, std = aggregate_folds(values)
    return f"{mean:.2f} ({std:.2f})"
