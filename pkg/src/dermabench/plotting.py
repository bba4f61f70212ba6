"""Figures written next to each run: confusion heatmap and training curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402
from .metrics import ConfusionMatrix  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}

# a fixed Software tag keeps PNG bytes stable across runs
_PNG_METADATA = {"Software": "dermabench"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_METADATA, bbox_inches="tight")
    plt.close(fig)
    return path


def confusion_figure(cm: ConfusionMatrix, title: str | None = None):
    counts = np.asarray(cm.counts)
    names = CLASS_NAMES[: len(counts)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 5.6))
        im = ax.imshow(counts, cmap="Blues")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set_xticks(range(len(names)), labels=names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), labels=names)
        ax.set_xlabel("Predicted label")
        ax.set_ylabel("True label")
        if title:
            ax.set_title(title)
        threshold = counts.max() / 2 if counts.size else 0
        for i in range(counts.shape[0]):
            for j in range(counts.shape[1]):
                ax.text(
                    j, i, str(int(counts[i, j])), ha="center", va="center",
                    color="white" if counts[i, j] > threshold else "black",
                )
        fig.tight_layout()
    return fig


def emit_confusion_plot(cm: ConfusionMatrix, path, title: str | None = None) -> Path:
    return _save(confusion_figure(cm, title), path)


def curves_figure(history: Sequence, title: str | None = None):
    if not history:
        raise ValueError("history must contain at least one epoch")
    epochs = np.array([r.epoch for r in history])
    val_loss = np.array([r.validation_loss for r in history])
    best_idx = int(np.argmin(val_loss))
    best = int(epochs[best_idx])
    panels = (
        ("Loss", "train_loss", "validation_loss"),
        ("Accuracy", "train_accuracy", "validation_accuracy"),
    )
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for ax, (label, train_key, val_key) in zip(axes, panels):
            ax.plot(epochs, [getattr(r, train_key) for r in history], "o-", ms=3, label="train")
            ax.plot(epochs, [getattr(r, val_key) for r in history], "s-", ms=3, label="validation")
            ax.axvline(best, color="0.4", ls="--", lw=1, label=f"best epoch ({best})")
            ax.plot(best, getattr(history[best_idx], val_key), "k*", ms=9, clip_on=False)
            ax.set_xlabel("Epoch")
            ax.set_ylabel(label)
            if len(epochs) > 1:
                ax.set_xlim(epochs[0], epochs[-1])
            else:
                ax.set_xlim(epochs[0] - 0.5, epochs[0] + 0.5)
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
            ax.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return fig


def emit_curves(history: Sequence, path, title: str | None = None) -> Path:
    return _save(curves_figure(history, title), path)
