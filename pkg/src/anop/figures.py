"""Report figures rendered next to the metrics CSV: learned position-matrix
heatmaps, loss traces, and method comparison bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_position_matrix(matrix: np.ndarray, path: str | Path,
                         title: str = "position matrix") -> Path:
    """Heatmap of the learned assignment: row = output position,
    column = source token."""
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0)
    ax.set_xlabel("source token")
    ax.set_ylabel("output position")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_loss_curves(traces: dict[str, list[float]], path: str | Path,
                     title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for name, values in traces.items():
        if values:
            ax.plot(np.arange(1, len(values) + 1), values, label=name, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_metric_bars(rows: list[tuple[str, float, float, float]], path: str | Path,
                     title: str = "base / novel / harmonic mean") -> Path:
    """Grouped bars per method row: (label, base, novel, hm)."""
    labels = [r[0] for r in rows]
    x = np.arange(len(rows))
    width = 0.26
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(rows), 3.4))
    for i, (name, color) in enumerate((("base", "#4c72b0"), ("novel", "#dd8452"),
                                       ("HM", "#55a868"))):
        vals = [r[i + 1] for r in rows]
        ax.bar(x + (i - 1) * width, vals, width, label=name, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 102)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_ablation_curve(axis: str, cells, path: str | Path) -> Path:
    """Mean HM with std whiskers per ablation cell."""
    labels = [str(c.value) for c in cells]
    means = [c.summary()["hm_mean"] for c in cells]
    stds = [c.summary()["hm_std"] for c in cells]
    x = np.arange(len(cells))
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(cells), 3.4))
    ax.errorbar(x, means, yerr=stds, marker="o", capsize=3, lw=1.2)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_xlabel(axis)
    ax.set_ylabel("harmonic mean (%)")
    ax.set_title(f"ablation: {axis}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
