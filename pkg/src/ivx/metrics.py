"""Binary (ACC, ROC/AUC, MCC) and multiclass (recognition rate, confusion) metrics."""

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive) -> "BinaryCounts":
        t = np.asarray([y == positive for y in y_true])
        p = np.asarray([y == positive for y in y_pred])
        if t.shape != p.shape:
            raise DataError(f"{t.size} truths vs {p.size} predictions")
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    classes: tuple = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(counts) -> float:
    """ACC for BinaryCounts; recognition rate (trace/total) for a ConfusionMatrix."""
    if isinstance(counts, ConfusionMatrix):
        correct, total = int(np.trace(counts.counts)), counts.total
    else:
        correct, total = counts.tp + counts.tn, counts.total
    if total <= 0:
        raise DataError("accuracy of an empty evaluation is undefined")
    return correct / total


def fpr(counts: BinaryCounts) -> float:
    return counts.fp / (counts.fp + counts.tn) if counts.fp + counts.tn else 0.0


def tpr(counts: BinaryCounts) -> float:
    return counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0


def mcc(counts: BinaryCounts) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def roc_auc(scores, labels):
    """ROC by sweeping every distinct score as a threshold, AUC by trapezoids.

    ``labels`` are truthy for the positive class. Equal scores share one
    threshold, which makes the trapezoidal area equal to the pairwise
    statistic with ties counted as one half. Returns ``(auc, points)``
    with points running from (0, 0) to (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores vs {y.size} labels")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = np.cumsum(~y)[cut]
    tp_rate = np.r_[0, tps] / n_pos
    fp_rate = np.r_[0, fps] / n_neg
    # integer-count trapezoids keep the area exact
    tp_all, fp_all = np.r_[0, tps], np.r_[0, fps]
    area2 = np.sum((fp_all[1:] - fp_all[:-1]) * (tp_all[1:] + tp_all[:-1]))
    auc = float(area2) / (2.0 * n_pos * n_neg)
    return auc, list(zip(fp_rate.tolist(), tp_rate.tolist()))


def pairwise_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUC needs both positive and negative samples")
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def confusion(y_true, y_pred, codec) -> ConfusionMatrix:
    y_true, y_pred = list(y_true), list(y_pred)
    if len(y_true) != len(y_pred):
        raise DataError(f"{len(y_true)} truths vs {len(y_pred)} predictions")
    k = len(codec)
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[codec.index(t), codec.index(p)] += 1
    return ConfusionMatrix(counts, tuple(codec.classes))


def binary_metrics(scores, y_true, y_pred, positive) -> dict:
    counts = BinaryCounts.from_predictions(y_true, y_pred, positive)
    auc, points = roc_auc(scores, [y == positive for y in y_true])
    return {
        "task": "binary",
        "positive_class": positive,
        "n": counts.total,
        "counts": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn},
        "acc": accuracy(counts),
        "tpr": tpr(counts),
        "fpr": fpr(counts),
        "auc": auc,
        "mcc": mcc(counts),
        "roc": [list(p) for p in points],
    }


def multiclass_metrics(y_true, y_pred, codec) -> dict:
    cm = confusion(y_true, y_pred, codec)
    return {
        "task": "multiclass",
        "n": cm.total,
        "classes": list(cm.classes),
        "recognition_rate": accuracy(cm),
        "chance": 1.0 / len(codec),
        "confusion": cm.counts.tolist(),
    }


def report(metrics: dict, config_hash: str = "", model_hashes: dict = None) -> str:
    """Deterministic JSON document: sorted keys, fixed float formatting."""
    if not metrics:
        raise DataError("report needs at least one metric")
    doc = {"metrics": metrics, "provenance": {"config_hash": config_hash, "model_hashes": model_hashes or {}}}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def confusion_csv(cm) -> str:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm["confusion"])
    classes = list(cm.classes) if isinstance(cm, ConfusionMatrix) else cm["classes"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + classes)
    for c, row in zip(classes, counts):
        w.writerow([c] + [int(v) for v in row])
    return buf.getvalue()


def roc_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for f, t in points:
        w.writerow([repr(float(f)), repr(float(t))])
    return buf.getvalue()
