"""Figures written next to the delimited reports. Rendering is headless (Agg)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def epoch_curves(records, path) -> Path:
    """Train/validation loss, IoU, MAE and MSE against epoch, one panel each."""
    epochs = [r.epoch for r in records]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8.0, 5.5), sharex=True)
        for ax, key in zip(axes.flat, ("loss", "iou", "mae", "mse")):
            ax.plot(epochs, [getattr(r, f"train_{key}") for r in records], label="train")
            ax.plot(epochs, [getattr(r, f"val_{key}") for r in records], label="validation")
            ax.set_title(key.upper() if key != "loss" else "loss")
            if key in ("mae", "mse"):
                ax.set_yscale("log")
        for ax in axes[1]:
            ax.set_xlabel("epoch")
        axes[0, 0].legend()
        return _save(fig, path)


def scree(eigenvalue_fractions, path, n_show: int | None = 30) -> Path:
    """Variance fraction per component (bars) with the cumulative share (line)."""
    frac = np.asarray(eigenvalue_fractions, dtype=np.float64)
    if n_show is not None:
        frac = frac[:n_show]
    idx = np.arange(1, frac.size + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(idx, frac, color="0.45", width=0.8, label="component")
        ax.set_yscale("log")
        ax.set_xlabel("component")
        ax.set_ylabel("variance fraction")
        ax2 = ax.twinx()
        ax2.plot(idx, np.cumsum(frac), color="C3", marker=".", label="cumulative")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("cumulative fraction")
        ax2.grid(False)
        return _save(fig, path)


def eval_bars(report, path) -> Path:
    """Grouped bars per tissue class for each metric, splits side by side."""
    splits = list(report.metrics)
    rows = report.rows()
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.6))
        width = 0.8 / max(len(splits), 1)
        x = np.arange(len(rows))
        for ax, metric in zip(axes, ("iou", "mae", "mse")):
            for k, split in enumerate(splits):
                vals = [report.metrics[split].get(r, {}).get(metric, np.nan) for r in rows]
                ax.bar(x + (k - (len(splits) - 1) / 2) * width, vals, width, label=split)
            ax.set_xticks(x, rows, rotation=30)
            ax.set_title(metric.upper())
        axes[0].legend()
        return _save(fig, path)


def bench_times(sizes, direct, fft, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(sizes, direct, marker="o", label="direct")
        ax.plot(sizes, fft, marker="s", label="fft")
        ax.set_xlabel("decay map edge [voxels]")
        ax.set_ylabel("time [s]")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)
