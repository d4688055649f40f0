"""Figure rendering for the CLI report paths.

Every function writes one PNG next to the delimited output it illustrates.
The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curve(history: Sequence[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(history)), history, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.set_yscale("log" if min(history, default=1) > 0 else "linear")
    ax.set_title("training objective")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cooccurrence_heatmap(matrix, names: Sequence[str], path) -> None:
    n = len(names)
    size = max(4.0, 0.3 * n + 2.0)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(n), names, rotation=90, fontsize=7)
    ax.set_yticks(range(n), names, fontsize=7)
    fig.colorbar(im, ax=ax, shrink=0.8, label="phi")
    ax.set_title("pairwise attribute co-occurrence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_bars(report, path) -> None:
    """Per-attribute accuracy bars (nominal) and an MAE panel (ordinal)."""
    acc = [(r.attribute, r.value) for r in report.rows
           if r.metric == "accuracy"]
    err = [(r.attribute, r.value) for r in report.rows if r.metric == "mae"]
    panels = (1 if acc else 0) + (1 if err else 0)
    if panels == 0:
        return
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 3.5), squeeze=False)
    col = 0
    if acc:
        ax = axes[0][col]
        names, vals = zip(*acc)
        ax.bar(range(len(vals)), vals, color="#4878d0")
        ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel("accuracy")
        col += 1
    if err:
        ax = axes[0][col]
        names, vals = zip(*err)
        ax.bar(range(len(vals)), vals, color="#d65f5f")
        ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
        ax.set_ylabel("mae")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison_bars(table, path) -> None:
    """Joint-vs-single-task mean scores per attribute."""
    rows = table.rows
    idx = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(5.0, 0.6 * len(rows) + 2), 3.5))
    ax.bar([i - width / 2 for i in idx], [r.mean_dmtl() for r in rows],
           width, label="multi-task", color="#4878d0")
    ax.bar([i + width / 2 for i in idx], [r.mean_stl() for r in rows],
           width, label="single-task", color="#ee854a")
    ax.set_xticks(list(idx), [r.attribute for r in rows], rotation=45,
                  ha="right", fontsize=8)
    ax.set_ylabel("held-out score")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
