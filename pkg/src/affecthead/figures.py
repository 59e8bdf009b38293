"""Report figures rendered next to the delimited outputs.

PNG output is byte-deterministic: fixed figure geometry, fixed dpi, and a
pinned Software metadata tag.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ConfusionMatrix

_SAVEFIG_KW = dict(dpi=120, metadata={"Software": "affecthead"})


def render_confusion(cm: ConfusionMatrix, path, title: str = "Confusion matrix") -> None:
    counts = cm.counts
    n = counts.shape[0]
    fig, ax = plt.subplots(figsize=(1.1 * n + 2.2, 1.0 * n + 1.6))
    row_sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shades = np.where(row_sums > 0, counts / np.maximum(row_sums, 1), 0.0)
    ax.imshow(shades, cmap="Blues", vmin=0.0, vmax=1.0)
    for r in range(n):
        for c in range(n):
            color = "white" if shades[r, c] > 0.5 else "black"
            ax.text(c, r, str(int(counts[r, c])), ha="center", va="center",
                    color=color, fontsize=9)
    ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def render_bars(values, names, path, title: str, ylabel: str = "F1") -> None:
    values = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(values) + 1.5), 3.2))
    ax.bar(range(len(values)), values, color="#4878a8")
    ax.set_xticks(range(len(values)), names, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def render_history(history: list[dict], path) -> None:
    """Training curves: per-task loss (left) and validation metric (right)."""
    epochs = [row["epoch"] for row in history]
    loss_keys = [k for k in history[0] if k.endswith("_loss") or k == "loss"]
    val_keys = [k for k in history[0] if k.startswith("val") or "_val_" in k]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for k in loss_keys:
        ax1.plot(epochs, [row[k] for row in history], label=k)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.legend(fontsize=8)
    for k in val_keys:
        ax2.plot(epochs, [row[k] for row in history], label=k)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation metric")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
