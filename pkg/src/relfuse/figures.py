"""Matplotlib renderings of sweep curves, histograms, and loss traces.

Every function takes already-computed results, writes one PNG, and
returns the path.  Rendering is pinned for reproducibility: fixed figure
geometry, no timestamps in the output metadata.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

_SAVE_KW = {"metadata": {"Software": "relfuse"}, "dpi": 110}


def _finish(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def sweep_curve(rows, x_attr: str, path: str | Path, xlabel: str) -> Path:
    """Accuracy against a swept numeric parameter (eta or steps)."""
    xs = [getattr(row, x_attr) for row in rows]
    ys = [row.accuracy for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def anchor_curve(rows, path: str | Path) -> Path:
    """Accuracy against the anchor-set condition labels."""
    labels = [row.anchors for row in rows]
    ys = [row.accuracy for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(rows)), ys, marker="o")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel("anchor set")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def accuracy_bars(rows, path: str | Path) -> Path:
    """Per-model and ensemble accuracy, grouped by split."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"{row.model}\n{row.split}" for row in rows]
    colors = [
        "tab:orange" if row.condition == "ensemble" else "tab:blue" for row in rows
    ]
    ax.bar(range(len(rows)), [row.accuracy for row in rows], color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def ablation_bars(rows, path: str | Path) -> Path:
    """Row-normalized versus raw-cosine ensemble accuracy."""
    fig, ax = plt.subplots(figsize=(5, 4))
    labels = [row.condition for row in rows]
    ax.bar(labels, [row.accuracy for row in rows], color=["tab:blue", "tab:red"])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def nn_histogram(stats, path: str | Path, title: str = "") -> Path:
    """Distribution of nearest-neighbor cosines over an embedding table."""
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(stats.edges)
    ax.bar(stats.edges[:-1], stats.counts, width=widths, align="edge",
           edgecolor="white")
    ax.set_xlabel("nearest-neighbor cosine")
    ax.set_ylabel("tokens")
    if title:
        ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def consistency_hist(
    shared: Sequence[float], mismatched: Sequence[float], path: str | Path
) -> Path:
    """Shared-token agreement against the random-pair baseline."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(-1.0, 1.0, 41)
    ax.hist(mismatched, bins=bins, alpha=0.6, label="mismatched pairs",
            density=True, color="tab:gray")
    ax.hist(shared, bins=bins, alpha=0.6, label="same token", density=True,
            color="tab:green")
    ax.axvline(float(np.mean(shared)), color="tab:green", linestyle="--")
    ax.axvline(float(np.mean(mismatched)), color="tab:gray", linestyle="--")
    ax.set_xlabel("cosine between relative representations")
    ax.set_ylabel("density")
    ax.legend()
    return _finish(fig, path)


def loss_trace(trace, path: str | Path) -> Path:
    """Initial and final search loss per decoding step."""
    steps = [s.step for s in trace.steps]
    floor = 1e-12
    loss0 = [max(s.loss0, floor) for s in trace.steps]
    lossT = [max(s.lossT, floor) for s in trace.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, loss0, label="before search", color="tab:red", alpha=0.8)
    ax.plot(steps, lossT, label="after search", color="tab:blue", alpha=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("decoding step")
    ax.set_ylabel("divergence from aggregate")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)
