"""Figures written next to the CSV outputs: loss curves, protocol and ablation bars."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from umafd.losses import LOSS_NAMES  # noqa: E402

FIG_SIZE = (6.4, 4.0)
DPI = 120
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def _smooth(values: Sequence[float], window: int) -> list[float]:
    if window <= 1 or len(values) <= window:
        return list(values)
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_training_log(log_csv, out_png, window: int = 50) -> Path:
    """Running-mean curve of every loss column in a ``train_log.csv``."""
    with open(log_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    if rows:
        steps = [int(r["step"]) for r in rows]
        for color, name in zip(PALETTE, (*LOSS_NAMES, "total")):
            vals = [float(r[name]) for r in rows]
            if any(vals):
                ax.plot(steps, _smooth(vals, window), label=name, color=color, lw=1.2)
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (running mean, {window} steps)")
    ax.set_yscale("symlog", linthresh=1e-3)
    return _save(fig, out_png)


def _bar_metrics(labels: Sequence[str], rows: Sequence[Sequence[float]], fields: Sequence[str], out_png, title: str) -> Path:
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    n = max(len(labels), 1)
    width = 0.8 / max(len(fields), 1)
    for j, (name, color) in enumerate(zip(fields, PALETTE)):
        xs = [i + (j - (len(fields) - 1) / 2) * width for i in range(len(labels))]
        ax.bar(xs, [100 * r[j] for r in rows], width=width, label=name, color=color)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_xlim(-0.6, n - 0.4)
    ax.set_ylim(0, 105)
    ax.set_ylabel("depth test (%)")
    ax.set_title(title, fontsize=10)
    ax.legend(frameon=False, fontsize=8, ncol=len(fields))
    return _save(fig, out_png)


def plot_report(report_csv, out_png) -> Path:
    """Per-seed (and median) metric bars for one ``report_<protocol>.csv``."""
    with open(report_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fields = ("accuracy", "precision", "recall", "f1", "auc")
    labels = [f"seed {r['seed']}" if r["seed"] != "median" else "median" for r in rows]
    values = [[float(r[k]) for k in fields] for r in rows]
    title = rows[0]["protocol"] if rows else ""
    return _bar_metrics(labels, values, fields, out_png, title)


def plot_ablation(ablation_csv, out_png) -> Path:
    with open(ablation_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fields = ("accuracy", "f1", "auc")
    return _bar_metrics([r["stage"] for r in rows], [[float(r[k]) for k in fields] for r in rows], fields, out_png, "ablation")


def plot_protocols(medians: dict[str, float], out_png, metric: str = "accuracy") -> Path:
    """One bar per protocol, e.g. the median depth-test accuracy over seeds."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    names = list(medians)
    ax.bar(names, [100 * medians[k] for k in names], color=PALETTE[: len(names)])
    for i, k in enumerate(names):
        ax.text(i, 100 * medians[k] + 1, f"{100 * medians[k]:.1f}", ha="center", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel(f"median depth-test {metric} (%)")
    return _save(fig, out_png)
