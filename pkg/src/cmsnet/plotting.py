"""Matplotlib figures written next to the CSV reports (non-interactive Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    # no version stamp, so identical inputs give byte-identical files across matplotlib versions
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_sweep(curves: dict, path, xlabel: str = "impaired fraction") -> None:
    """One line per condition: mIoU (percent) against the sweep variable."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        x = [f for f, _ in curve]
        y = [100 * m for _, m in curve]
        ax.plot(x, y, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mIoU (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_bench(samples: dict, path) -> None:
    """Boxplot of per-iteration images-per-second, one box per configuration."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(samples) + 2), 4))
    ax.boxplot(list(samples.values()), whis=1.5)
    ax.set_xticks(range(1, len(samples) + 1), list(samples.keys()))
    ax.set_ylabel("FPS (images/s)")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_class_metrics(ious, accuracies, names, path) -> None:
    """Grouped bars of per-class IoU and pixel accuracy."""
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(names) + 2), 4))
    ax.bar(x - 0.2, np.nan_to_num(np.asarray(ious, float)), 0.4, label="IoU")
    ax.bar(x + 0.2, np.nan_to_num(np.asarray(accuracies, float)), 0.4, label="pixel accuracy")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path)


def plot_training(rows, path) -> None:
    """Loss and training mIoU per epoch."""
    epochs = [r["epoch"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, [r["loss"] for r in rows], color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["miou"] for r in rows], color="tab:blue")
    ax2.set_ylabel("mIoU", color="tab:blue")
    _save(fig, path)
