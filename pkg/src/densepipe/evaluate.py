"""Prediction, confusion matrices, classification metrics and latency timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .model import infer_logits
from .tensor import no_grad


def _inputs(dataset):
    return np.asarray(dataset.x if hasattr(dataset, "x") else dataset, dtype=np.float64)


def predict_labels(model, dataset, batch_size=64):
    """Argmax class per sample; exact ties go to the lower class index."""
    x = _inputs(dataset)
    if x.ndim == 3:
        x = x[None]
    return np.argmax(infer_logits(model, x, batch_size), axis=1)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts with class ``positive`` (female) as positive."""

    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fn + self.fp + self.tn

    def swapped(self):
        """The same matrix with the other class taken as positive."""
        return ConfusionMatrix(self.tn, self.fp, self.fn, self.tp)

    def as_rows(self):
        """[[tp, fn], [fp, tn]]: rows actual, columns predicted, positive first."""
        return [[self.tp, self.fn], [self.fp, self.tn]]


def confusion(actual, predicted, positive=0):
    a = np.asarray(actual)
    p = np.asarray(predicted)
    if a.shape != p.shape or a.ndim != 1:
        raise ShapeError(f"actual {a.shape} and predicted {p.shape} must be equal-length vectors",
                         axis="batch")
    if positive not in (0, 1):
        raise ParameterError(f"positive class must be 0 or 1, got {positive}")
    for name, v in (("actual", a), ("predicted", p)):
        if v.size and not np.all((v == 0) | (v == 1)):
            raise DataError(f"{name} labels must be binary (0/1)")
    pa, pp = a == positive, p == positive
    return ConfusionMatrix(tp=int(np.sum(pa & pp)), fn=int(np.sum(pa & ~pp)),
                           fp=int(np.sum(~pa & pp)), tn=int(np.sum(~pa & ~pp)))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    undefined: dict = field(default_factory=dict)

    def as_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "specificity": self.specificity, "f1": self.f1}


def _ratio(num, den):
    return (0.0, True) if den == 0 else (num / den, False)


def f1_score(precision, recall):
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def metrics(cm):
    """Accuracy, precision, recall, specificity and F1; 0/0 reports 0 with a flag."""
    if cm.total <= 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision, u_p = _ratio(cm.tp, cm.tp + cm.fp)
    recall, u_r = _ratio(cm.tp, cm.tp + cm.fn)
    specificity, u_s = _ratio(cm.tn, cm.tn + cm.fp)
    f1 = f1_score(precision, recall)
    undefined = {"precision": u_p, "recall": u_r, "specificity": u_s,
                 "f1": precision + recall == 0}
    return MetricsReport(accuracy, precision, recall, specificity, f1, undefined)


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    runs: int


def bench_inference(model, dataset, warmup=3, runs=20):
    """Single-image eval-mode forward latency in milliseconds.

    Images are taken round-robin from ``dataset``; warmup passes are not timed.
    """
    from .model import forward

    x = _inputs(dataset)
    if len(x) == 0:
        raise DataError("cannot benchmark on an empty dataset")
    if runs < 1 or warmup < 0:
        raise ParameterError(f"need runs >= 1 and warmup >= 0, got {runs}, {warmup}")
    times = []
    with no_grad():
        for i in range(warmup + runs):
            sample = x[i % len(x)][None]
            t0 = time.perf_counter()
            forward(model, sample, "eval")
            elapsed = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(elapsed)
    t = np.asarray(times)
    return LatencyReport(float(t.mean()), float(t.std()), float(t.min()), float(t.max()), runs)
