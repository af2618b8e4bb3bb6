"""Figure rendering for the reporting paths.

Every command that writes a delimited report also renders a small
matplotlib figure next to it: loss curves for training runs, metric bars
for evaluations, weight heatmaps for attention dumps, and grouped bars for
ablation and robustness tables. All figures go straight to files; no
interactive backend is ever required.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_DPI = 130


def _finish(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)


def save_loss_curves(curves: dict[str, list[tuple[int, float]]], path: str | Path) -> None:
    """Per-epoch training loss, one line per labeled run."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, rows in curves.items():
        if not rows:
            continue
        epochs, losses = zip(*rows)
        ax.plot(epochs, losses, label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (nats/step)")
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(fontsize=7, ncol=2)
    _finish(fig, path)


def save_metric_bars(rows: list[tuple[str, tuple[float, float, float, float]]],
                     path: str | Path) -> None:
    """Grouped bars of the four report metrics (values in percent)."""
    metric_names = ("mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins")
    labels = [label for label, _ in rows]
    values = np.array([vals for _, vals in rows]) * 100.0
    x = np.arange(len(metric_names))
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i, label in enumerate(labels):
        ax.bar(x + i * width, values[i], width, label=label)
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(metric_names)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=7)
    _finish(fig, path)


def save_per_attribute_ap(ap_values: list[float | None], names: list[str],
                          path: str | Path) -> None:
    defined = [(n, v) for n, v in zip(names, ap_values) if v is not None]
    if not defined:
        return
    labels, values = zip(*defined)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(labels)), 3.4))
    ax.bar(range(len(values)), [100.0 * v for v in values])
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("balanced accuracy (%)")
    ax.set_ylim(0, 105)
    ax.grid(axis="y", alpha=0.3)
    _finish(fig, path)


def save_attention_heatmap(weights: np.ndarray, path: str | Path, title: str = "") -> None:
    """Region-by-step attention weights for one decoded image."""
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    im = ax.imshow(weights, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("decode step")
    ax.set_ylabel("region (top to bottom)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _finish(fig, path)


def save_comparison_bars(rows: list[tuple[str, dict[str, float]]], path: str | Path,
                         ylabel: str = "percent") -> None:
    """One bar group per row label, one bar per named value (already in percent)."""
    if not rows:
        return
    value_names = list(rows[0][1].keys())
    x = np.arange(len(rows))
    width = 0.8 / max(len(value_names), 1)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i, name in enumerate(value_names):
        ax.bar(x + i * width, [vals[name] for _, vals in rows], width, label=name)
    ax.set_xticks(x + width * (len(value_names) - 1) / 2)
    ax.set_xticklabels([label for label, _ in rows], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=7)
    _finish(fig, path)
