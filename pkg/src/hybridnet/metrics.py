"""Confusion-matrix metrics and fold aggregation."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "mcc")


class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    def __init__(self, num_classes: int, label_names: Sequence[str] | None = None):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.label_names = list(label_names) if label_names is not None else [
            str(i) for i in range(num_classes)
        ]

    @classmethod
    def from_counts(cls, counts, label_names=None) -> "ConfusionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        cm = cls(counts.shape[0], label_names)
        cm.counts = counts.copy()
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label: int, predicted_label: int) -> "ConfusionMatrix":
        c = self.num_classes
        if not (0 <= true_label < c and 0 <= predicted_label < c):
            raise ValueError(f"labels ({true_label}, {predicted_label}) outside [0, {c})")
        self.counts[true_label, predicted_label] += 1
        return self

    def update(self, true_labels, predicted_labels) -> "ConfusionMatrix":
        for t, p in zip(np.asarray(true_labels).tolist(), np.asarray(predicted_labels).tolist()):
            self.accumulate(t, p)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix.from_counts(self.counts + other.counts, self.label_names)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.label_names])
            for name, row in zip(self.label_names, self.counts.tolist()):
                w.writerow([name, *row])


def _check(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise ValueError("metrics are undefined on an empty confusion matrix")
    return cm.counts


def accuracy(cm: ConfusionMatrix) -> float:
    counts = _check(cm)
    return float(np.trace(counts)) / float(counts.sum())


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    undefined: int  # per-class precision/recall values forced to 0


def weighted_prf(cm: ConfusionMatrix) -> PRF:
    """Support-weighted precision, recall and F1 (weighted mean of per-class F1)."""
    counts = _check(cm).astype(np.float64)
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    undefined = int((predicted == 0).sum() + (support == 0).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(predicted > 0, tp / predicted, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    weights = support / support.sum()
    # sum_i (s_i/N)(tp_i/s_i) cancels to trace/N; use that form so it equals accuracy exactly
    recall = float(tp.sum()) / float(support.sum())
    return PRF(float(weights @ p), recall, float(weights @ f1), undefined)


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation coefficient (0 when undefined)."""
    counts = _check(cm)
    s = int(counts.sum())
    c = int(np.trace(counts))
    t = counts.sum(axis=1).astype(object)
    p = counts.sum(axis=0).astype(object)
    num = c * s - int(np.dot(t, p))
    d1 = s * s - int(np.dot(p, p))
    d2 = s * s - int(np.dot(t, t))
    if d1 == 0 or d2 == 0:
        return 0.0
    return num / math.sqrt(d1 * d2)


def evaluate(cm: ConfusionMatrix) -> dict[str, float]:
    prf = weighted_prf(cm)
    return {
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
        "accuracy": accuracy(cm),
        "mcc": mcc(cm),
    }


@dataclass
class MetricsReport:
    folds: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)

    @property
    def fold_count(self) -> int:
        return len(self.folds)


def aggregate(fold_metrics: Sequence[dict[str, float]]) -> MetricsReport:
    """Mean and population standard deviation of each metric over folds.

    ``statistics`` works in exact rationals, so identical folds give SD 0.
    """
    if not fold_metrics:
        raise ValueError("need at least one fold")
    folds = [dict(f) for f in fold_metrics]
    mean, sd = {}, {}
    for name in METRIC_NAMES:
        vals = [float(f[name]) for f in folds]
        mean[name] = statistics.fmean(vals)
        sd[name] = statistics.pstdev(vals)
    return MetricsReport(folds, mean, sd)


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def write_report(report: MetricsReport, path, fmt: str = "csv") -> None:
    rows = [(str(i), f) for i, f in enumerate(report.folds)]
    rows += [("mean", report.mean), ("sd", report.sd)]
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", *METRIC_NAMES])
            for label, vals in rows:
                w.writerow([label, *(_fmt(vals[m]) for m in METRIC_NAMES)])
    elif fmt == "json-lines":
        with open(path, "w") as fh:
            for label, vals in rows:
                rec = {"fold": label, **{m: round(vals[m], 4) for m in METRIC_NAMES}}
                fh.write(json.dumps(rec) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {
            row["fold"]: {m: float(row[m]) for m in METRIC_NAMES}
            for row in csv.DictReader(fh)
        }
