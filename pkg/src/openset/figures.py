"""Matplotlib figure rendering for training and evaluation outputs.

All functions write a PNG to the given path and return that path. The Agg
backend is forced so rendering works without a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import SweepPoint
from .trainer import EpochStats


def plot_loss_curves(history: list[EpochStats], path) -> str:
    """Per-epoch classification, reconstruction and total loss."""
    if not history:
        raise ValueError("empty training history")
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for attr, label in (("l_c", "classification"), ("l_r", "reconstruction"), ("l_t", "total")):
        values = [getattr(h, attr) for h in history]
        if all(np.isnan(values)):
            continue
        ax.plot(epochs, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_error_histogram(
    known_errors, unknown_errors=None, threshold: float | None = None, path="errors.png"
) -> str:
    """Histogram of reconstruction errors, optionally split known/unknown.

    An optional vertical line marks the tail threshold.
    """
    known_errors = np.asarray(known_errors, dtype=np.float64)
    if known_errors.size == 0:
        raise ValueError("empty error list")
    parts = [known_errors]
    if unknown_errors is not None and len(unknown_errors):
        parts.append(np.asarray(unknown_errors, dtype=np.float64))
    lo = min(p.min() for p in parts)
    hi = max(p.max() for p in parts)
    bins = np.linspace(lo, hi if hi > lo else lo + 1.0, 40)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(known_errors, bins=bins, alpha=0.6, label="known", density=True)
    if len(parts) > 1:
        ax.hist(parts[1], bins=bins, alpha=0.6, label="unknown", density=True)
    if threshold is not None:
        ax.axvline(threshold, color="k", linestyle="--", label="tail threshold")
    ax.set_xlabel("reconstruction error")
    ax.set_ylabel("density")
    ax.set_title("reconstruction error distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_sweep(curves: dict[str, list[SweepPoint]], path) -> str:
    """F1 against openness, one line per method, with std error bars."""
    if not curves:
        raise ValueError("empty sweep result")
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(curves):
        pts = curves[method]
        x = [100.0 * p.openness for p in pts]
        y = [p.f1_mean for p in pts]
        err = [p.f1_std for p in pts]
        ax.errorbar(x, y, yerr=err, marker="o", markersize=4, capsize=3, label=method)
    ax.set_xlabel("openness (%)")
    ax.set_ylabel("F-measure")
    ax.set_title("open-set performance vs openness")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
