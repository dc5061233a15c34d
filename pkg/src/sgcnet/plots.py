"""PNG figures written next to the CSV/Markdown outputs of the CLI."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def weight_histogram(path, counts: np.ndarray, edges: np.ndarray, layer: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="#4c72b0",
           edgecolor="none")
    ax.set_xlabel("weight value")
    ax.set_ylabel("count")
    ax.set_title(layer)
    _save(fig, path)


def flops_bars(path, layers: Sequence[str], macs: Sequence[int],
               baseline: Optional[Sequence[int]] = None) -> None:
    y = np.arange(len(layers))
    fig, ax = plt.subplots(figsize=(7, max(3.0, 0.18 * len(layers) + 1)))
    if baseline is not None:
        ax.barh(y + 0.2, baseline, height=0.4, color="#bbbbbb", label="baseline")
        ax.barh(y - 0.2, macs, height=0.4, color="#dd8452", label="this run")
        ax.legend(loc="lower right")
    else:
        ax.barh(y, macs, height=0.6, color="#dd8452")
    ax.set_yticks(y)
    ax.set_yticklabels(layers, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("MACs")
    _save(fig, path)


def training_curve(path, steps: Sequence[int], losses: Sequence[float]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    _save(fig, path)


def class_iou_bars(path, names: Sequence[str], values: Sequence[float]) -> None:
    vals = np.nan_to_num(np.asarray(values, float), nan=0.0)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(np.arange(len(names)), vals, color="#55a868")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    _save(fig, path)
