"""Matplotlib renderings of the diagnostic tables. Every figure lands next to
its delimited source so reports stay self-contained."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path) -> None:
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot_data_map(points, path) -> None:
    """Variability vs confidence scatter, colored by mean count-gap."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    if points:
        x = [p.variability for p in points]
        y = [p.confidence for p in points]
        c = [p.mean_gap for p in points]
        sc = ax.scatter(x, y, c=c, s=8, cmap="viridis", alpha=0.8)
        fig.colorbar(sc, ax=ax, label="mean count-gap")
    ax.set_xlabel("variability")
    ax.set_ylabel("confidence")
    ax.set_xlim(-0.02, 0.54)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("training-dynamics data map")
    _save(fig, path)


def plot_curves(series: dict[str, tuple[list, list]], ylabel: str, path, title: str = "") -> None:
    """One line per labeled (x, y) series."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        x, y = series[label]
        ax.plot(x, y, label=label, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_utilization(rows, path, title: str = "unlabeled data in the loss") -> None:
    """Counts of easy / ambiguous / total selected samples per iteration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        it = [r["iteration"] for r in rows]
        ax.plot(it, [r["n_used"] for r in rows], label="total used", linewidth=1.2)
        ax.plot(it, [r["n_easy"] for r in rows], label="easy", linewidth=1.0)
        ax.plot(it, [r["n_ambiguous"] for r in rows], label="ambiguous", linewidth=1.0)
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("samples per batch")
    ax.set_title(title)
    _save(fig, path)


def plot_subset_accuracy(rows, path) -> None:
    """Per-subset counts (top) and pseudo-label accuracy (bottom)."""
    fig, (ax_n, ax_acc) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    plotted = False
    for name, color in (("easy", "tab:green"), ("ambiguous", "tab:orange"), ("hard", "tab:red")):
        sub = [r for r in rows if r["subset"] == name]
        if not sub:
            continue
        plotted = True
        it = [r["iteration"] for r in sub]
        ax_n.plot(it, [r["n"] for r in sub], label=name, color=color, linewidth=1.0)
        acc = [np.nan if r["accuracy"] is None else r["accuracy"] for r in sub]
        ax_acc.plot(it, acc, label=name, color=color, linewidth=1.0)
    ax_n.set_ylabel("subset size")
    if plotted:
        ax_n.legend(fontsize=8)
    ax_acc.set_ylabel("pseudo-label accuracy")
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylim(-0.02, 1.02)
    _save(fig, path)
