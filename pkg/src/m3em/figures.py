"""Figure rendering for the report outputs.

Every delimited report the CLI writes (metrics key=value files, consensus CSV
grids, loss curves) gets a PNG rendered next to it.  The delimited files stay
the authoritative, deterministic record; figures are a convenience layer.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import EpochLoss, MetricsReport


def save_loss_curves(history: Sequence[EpochLoss], path: str | os.PathLike) -> None:
    epochs = np.arange(1, len(history) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [e.loss_y for e in history], label="classification")
    ax.plot(epochs, [e.loss_d for e in history], label="domain")
    ax.plot(epochs, [e.loss_total for e in history], label="combined", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_bars(report: MetricsReport, path: str | os.PathLike,
                      title: str = "") -> None:
    heads = ["verb", "noun", "action"]
    top1 = [report.verb_top1, report.noun_top1, report.action_top1]
    top5 = [report.verb_top5, report.noun_top5, report.action_top5]
    pos = np.arange(len(heads))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(pos - width / 2, top1, width, label="top-1")
    ax.bar(pos + width / 2, top5, width, label="top-5")
    ax.set_xticks(pos, heads)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gradcheck_bars(names: Sequence[str], errors: Sequence[float],
                        tolerance: float, path: str | os.PathLike) -> None:
    pos = np.arange(len(names))
    floor = 1e-16
    fig, ax = plt.subplots(figsize=(7, 0.32 * len(names) + 1.5))
    ax.barh(pos, np.maximum(errors, floor))
    ax.set_yticks(pos, names, fontsize=7)
    ax.axvline(tolerance, color="red", linestyle="--", label=f"tolerance {tolerance:g}")
    ax.set_xscale("log")
    ax.set_xlabel("max relative gradient error")
    ax.invert_yaxis()
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_consensus_grid(maps: Sequence[np.ndarray], path: str | os.PathLike,
                        max_panels: int = 16) -> None:
    shown = list(maps[:max_panels])
    if not shown:
        return
    cols = min(4, len(shown))
    rows = (len(shown) + cols - 1) // cols
    vmax = max(1.0, max(float(np.abs(m).max()) for m in shown))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        ax.axis("off")
        if idx < len(shown):
            im = ax.imshow(shown[idx], cmap="coolwarm", vmin=-vmax, vmax=vmax)
            ax.set_title(f"sample {idx}", fontsize=8)
    fig.colorbar(im, ax=[a for row in axes for a in row], shrink=0.8)
    fig.savefig(path, dpi=120)
    plt.close(fig)
