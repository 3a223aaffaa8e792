"""Static figures for run directories. Files only, no interactive display."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"sfmtl": "Navy", "fedu": "Crimson", "fedavg": "mediumseagreen", "local": "darkorchid"}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}


def fig_size(scale=1.0, ratio=0.62):
    width = 5.5 * scale
    return (width, width * ratio)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_curve(rounds: Sequence[int], mean_acc: Sequence[float], path: Path, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size())
        ax.plot(rounds, mean_acc, color=COLORS.get(label, "k"), label=label or None)
        ax.set_xlabel("round")
        ax.set_ylabel("mean test accuracy (sampled clients)")
        ax.set_ylim(0, 1.02)
        if label:
            ax.legend(frameon=False)
        return _save(fig, path)


def cumulative_bits(rounds: Sequence[int], bits_up: Sequence[float], bits_down: Sequence[float], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size())
        ax.plot(rounds, np.cumsum(bits_up), label="uplink", color="Navy")
        ax.plot(rounds, np.cumsum(bits_down), label="downlink", color="Crimson", linestyle="--")
        ax.set_xlabel("round")
        ax.set_ylabel("cumulative bits")
        ax.legend(frameon=False)
        return _save(fig, path)


def adjacency_heatmap(nodes: Sequence[int], adjacency: np.ndarray, path: Path, labels: Sequence[int] | None = None) -> Path:
    """Heatmap of edge weights, rows grouped by community when labels are given."""
    order = np.argsort(labels, kind="stable") if labels is not None else np.arange(len(nodes))
    a = np.asarray(adjacency)[np.ix_(order, order)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(0.8, 0.9))
        im = ax.imshow(a, cmap="viridis", vmin=0, vmax=max(1.0, float(a.max())))
        ticks = [nodes[i] for i in order]
        ax.set_xticks(range(len(ticks)), ticks)
        ax.set_yticks(range(len(ticks)), ticks)
        ax.set_xlabel("client")
        ax.set_ylabel("client")
        fig.colorbar(im, ax=ax, label="edge weight")
        return _save(fig, path)


def method_comparison(curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size())
        for method, (rounds, acc) in curves.items():
            ax.plot(rounds, acc, label=method, color=COLORS.get(method))
        ax.set_xlabel("round")
        ax.set_ylabel("mean test accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)
