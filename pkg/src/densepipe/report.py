"""Run reports: CSV/text tables plus PNG figures of curves and confusion."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluate import ConfusionMatrix, MetricsReport, metrics

METRIC_FIELDS = ("accuracy", "precision", "recall", "specificity", "f1")
COUNT_FIELDS = ("tp", "fn", "fp", "tn")
HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class RunReport:
    command: str
    classes: list
    confusion: ConfusionMatrix | None = None
    metrics: MetricsReport | None = None
    history: object = None                      # TrainHistory
    folds: list = field(default_factory=list)   # [(ConfusionMatrix, MetricsReport)] per fold
    timing: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def fmt(value):
    return f"{value:.6f}"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def metrics_row(cm, m):
    return [fmt(getattr(m, k)) for k in METRIC_FIELDS] + [str(getattr(cm, k)) for k in COUNT_FIELDS]


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history.records:
            w.writerow([r.epoch, fmt(r.train_loss), fmt(r.train_acc), fmt(r.val_loss), fmt(r.val_acc)])


def write_metrics_csv(cm, m, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(METRIC_FIELDS + COUNT_FIELDS)
        w.writerow(metrics_row(cm, m))


def fold_summary(folds):
    """Per-metric (mean, population std) over fold MetricsReports."""
    values = np.array([[getattr(m, k) for k in METRIC_FIELDS] for _, m in folds])
    return values.mean(axis=0), values.std(axis=0)


def write_folds_csv(folds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(("fold",) + METRIC_FIELDS + COUNT_FIELDS)
        for i, (cm, m) in enumerate(folds):
            w.writerow([str(i)] + metrics_row(cm, m))
        mean, std = fold_summary(folds)
        w.writerow(["mean"] + [fmt(v) for v in mean] + [""] * len(COUNT_FIELDS))
        w.writerow(["std"] + [fmt(v) for v in std] + [""] * len(COUNT_FIELDS))


def confusion_text(cm, classes):
    """Rows actual, columns predicted, positive class first."""
    pos, neg = classes[0], classes[1]
    labels = [f"actual {pos}", f"actual {neg}"]
    heads = [f"predicted {pos}", f"predicted {neg}"]
    left = max(len(s) for s in labels)
    col = max(max(len(s) for s in heads), len(str(max(cm.tp, cm.fn, cm.fp, cm.tn))))
    lines = [" " * left + "  " + "  ".join(h.rjust(col) for h in heads)]
    for label, row in zip(labels, cm.as_rows()):
        lines.append(label.ljust(left) + "  " + "  ".join(str(v).rjust(col) for v in row))
    return "\n".join(lines) + "\n"


def summary_text(report):
    lines = [f"command: {report.command}", f"classes: {', '.join(report.classes)} "
             f"(positive: {report.classes[0]})" if report.classes else "classes: -"]
    if report.history is not None and report.history.records:
        h = report.history
        best = h.records[h.best_epoch] if 0 <= h.best_epoch < len(h.records) else None
        lines.append(f"epochs trained: {len(h.records)}"
                     + (" (stopped early)" if h.stopped_early else ""))
        if best is not None:
            lines.append(f"best epoch: {best.epoch} (val_loss {fmt(best.val_loss)}, "
                         f"val_acc {fmt(best.val_acc)})")
    if report.metrics is not None:
        lines.append("")
        for k in METRIC_FIELDS:
            flag = " (undefined)" if report.metrics.undefined.get(k) else ""
            lines.append(f"{k:<12} {fmt(getattr(report.metrics, k))}{flag}")
    if report.confusion is not None:
        lines += ["", confusion_text(report.confusion, report.classes).rstrip("\n")]
    if report.folds:
        mean, std = fold_summary(report.folds)
        lines += ["", f"folds: {len(report.folds)}"]
        for k, mu, sd in zip(METRIC_FIELDS, mean, std):
            lines.append(f"{k:<12} mean {fmt(mu)}  std {fmt(sd)}")
    if report.timing:
        lines.append("")
        lines += [f"{k}: {v:.3f} s" for k, v in report.timing.items()]
    if report.config:
        lines += ["", "config:"] + [f"  {k} = {v}" for k, v in sorted(report.config.items())]
    lines += [""] + list(report.notes) if report.notes else []
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_history(history, path):
    plt = _pyplot()
    epochs = [r.epoch for r in history.records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.train_loss for r in history.records], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history.records], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.plot(epochs, [r.train_acc for r in history.records], label="train")
    ax_acc.plot(epochs, [r.val_acc for r in history.records], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    if 0 <= history.best_epoch < len(epochs):
        for ax in (ax_loss, ax_acc):
            ax.axvline(history.best_epoch, color="0.6", linestyle="--", linewidth=1)
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_confusion(cm, classes, path):
    plt = _pyplot()
    grid = np.array(cm.as_rows())
    fig, ax = plt.subplots(figsize=(3.8, 3.4))
    ax.imshow(grid, cmap="Blues")
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > grid.max() / 2 else "black")
    ax.set_xticks([0, 1], labels=classes[:2])
    ax.set_yticks([0, 1], labels=classes[:2])
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(report, out_dir, figures=True):
    """Write every table the report carries; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    if report.history is not None:
        write_history_csv(report.history, path("history.csv"))
    if report.confusion is not None:
        m = report.metrics if report.metrics is not None else metrics(report.confusion)
        write_metrics_csv(report.confusion, m, path("metrics.csv"))
        with open(path("confusion.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(confusion_text(report.confusion, report.classes))
    if report.folds:
        write_folds_csv(report.folds, path("folds.csv"))
    with open(path("report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(summary_text(report))
    if figures:
        if report.history is not None and report.history.records:
            plot_history(report.history, path("curves.png"))
        if report.confusion is not None:
            plot_confusion(report.confusion, report.classes, path("confusion.png"))
    return written
