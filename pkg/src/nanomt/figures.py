"""Render figures next to the delimited outputs of training runs and sweeps.

All functions read the CSVs written elsewhere and save PNG files; nothing in
the core library depends on this module.
"""

from __future__ import annotations

import csv
from pathlib import Path


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_training_curves(metrics_csv: Path | str, out_path: Path | str) -> Path:
    """Dev loss and dev accuracy/BLEU against training step."""
    steps, losses, accs, bleus = [], [], [], []
    with open(metrics_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != "dev":
                continue
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]) if row["loss"] else None)
            accs.append(float(row["accuracy"]) if row["accuracy"] else None)
            bleus.append(float(row["bleu"]) if row["bleu"] else None)

    plt = _plt()
    fig, (ax_loss, ax_quality) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(steps, losses, marker=".", color="tab:blue")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("dev loss")
    ax_loss.grid(alpha=0.3)
    if any(a is not None for a in accs):
        ax_quality.plot(steps, accs, marker=".", color="tab:green",
                        label="token accuracy")
    if any(b is not None for b in bleus):
        ax_quality.plot(steps, bleus, marker=".", color="tab:orange",
                        label="dev BLEU")
    ax_quality.set_xlabel("step")
    ax_quality.set_ylabel("quality")
    ax_quality.grid(alpha=0.3)
    ax_quality.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_capacity_sweep(sweep_csv: Path | str, out_path: Path | str) -> Path:
    """Dev BLEU against adapter bottleneck width (log2 x-axis)."""
    by_b: dict[int, list[float]] = {}
    with open(sweep_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_b.setdefault(int(row["bottleneck"]), []).append(
                float(row["dev_bleu"]))

    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    widths = sorted(by_b)
    means = [sum(by_b[b]) / len(by_b[b]) for b in widths]
    for b in widths:
        ax.scatter([b] * len(by_b[b]), by_b[b], color="tab:gray", s=12,
                   alpha=0.6)
    ax.plot(widths, means, marker="o", color="tab:blue", label="mean dev BLEU")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("adapter bottleneck")
    ax.set_ylabel("dev BLEU")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_datafraction_sweep(sweep_csv: Path | str, out_path: Path | str) -> Path:
    """Dev BLEU against adaptation-data fraction, one line per mode."""
    by_mode: dict[str, list[tuple[float, float]]] = {}
    with open(sweep_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_mode.setdefault(row["mode"], []).append(
                (float(row["fraction"]), float(row["dev_bleu"])))

    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for mode, points in sorted(by_mode.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o",
                label=mode)
    ax.set_xlabel("fraction of adaptation corpus")
    ax.set_ylabel("dev BLEU")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
