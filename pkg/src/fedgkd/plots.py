"""Report figures rendered alongside the delimited outputs.

Everything draws through the Agg backend so runs stay headless; the same
numbers always land in TSV/CSV form next to the figures, so external
plotting remains possible.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_convergence(
    curves: Mapping[str, Mapping[int, Sequence[tuple[int, float]]]],
    path: str | Path,
    title: str = "mean test accuracy per round",
) -> None:
    """One line per method: mean test accuracy across seeds, by round."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method, per_seed in sorted(curves.items()):
        if not per_seed:
            continue
        max_rounds = max(len(points) for points in per_seed.values())
        acc = np.full((len(per_seed), max_rounds), np.nan)
        for row, points in enumerate(per_seed.values()):
            for r, (_, v) in enumerate(points):
                acc[row, r] = v
        mean = np.nanmean(acc, axis=0)
        rounds = np.arange(1, max_rounds + 1)
        ax.plot(rounds, mean, label=method, linewidth=1.6)
        if acc.shape[0] > 1:
            std = np.nanstd(acc, axis=0)
            ax.fill_between(rounds, mean - std, mean + std, alpha=0.15)
    ax.set_xlabel("round")
    ax.set_ylabel("mean test accuracy")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_relation_heatmaps(
    relations: np.ndarray, mixing: np.ndarray, path: str | Path
) -> None:
    """Side-by-side heatmaps of the relation matrix and the mixing weights."""
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6))
    im0 = axes[0].imshow(relations, cmap="coolwarm", vmin=-1.0, vmax=1.0)
    axes[0].set_title("client relations")
    fig.colorbar(im0, ax=axes[0], fraction=0.046)
    im1 = axes[1].imshow(mixing, cmap="viridis", vmin=0.0)
    axes[1].set_title("aggregation weights")
    fig.colorbar(im1, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.set_xlabel("client")
        ax.set_ylabel("client")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_grid_ranking(
    rows: Sequence[dict], swept_keys: Sequence[str], path: str | Path, top: int = 20
) -> None:
    """Horizontal bars of the best grid cells by mean validation accuracy."""
    shown = list(rows[:top])
    fig, ax = plt.subplots(figsize=(6.5, 0.4 * max(4, len(shown))))
    labels = [
        ", ".join(f"{k}={cell[k]:g}" if isinstance(cell[k], float) else f"{k}={cell[k]}"
                  for k in swept_keys)
        for cell in shown
    ]
    values = [cell["mean_val_acc"] for cell in shown]
    ypos = np.arange(len(shown))[::-1]
    ax.barh(ypos, values, color="tab:blue", alpha=0.8)
    ax.set_yticks(ypos)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("mean validation accuracy")
    ax.set_title("grid search ranking")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
