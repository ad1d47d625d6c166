"""Matplotlib figures for reports (rendered off-screen to PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import FAILURE_THRESHOLD  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ced(curves: dict, path, title: str = "Cumulative error distribution"):
    """``curves`` maps a label to a list of ``(threshold, fraction)`` pairs."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, curve in curves.items():
        t, f = np.array(curve).T
        ax.plot(t, f, label=label)
    ax.axvline(FAILURE_THRESHOLD, color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of samples")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_stage_nme(per_stage, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(len(per_stage)), per_stage, marker="o")
    ax.set_xlabel("iteration t")
    ax.set_ylabel("mean NME")
    ax.set_title("Error per recurrent iteration")
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curve(rows, path):
    """Loss and train NME against epoch from ``TrainingLog.rows``."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.semilogy(epochs, [r["loss"] for r in rows], label="loss")
    ax.semilogy(epochs, [r["nme_train"] for r in rows], label="train NME")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_heatmap_sequence(image, heatmaps, path, landmarks=None):
    """Input image followed by the heat map used at each iteration."""
    n = len(heatmaps) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    axes = np.atleast_1d(axes)
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("input")
    for t, (ax, hm) in enumerate(zip(axes[1:], heatmaps)):
        ax.imshow(np.clip(hm, 0, 1))
        if landmarks is not None and t < len(landmarks):
            ax.plot(landmarks[t][0], landmarks[t][1], ".", color="white", markersize=1.5)
        ax.set_title(f"t = {t}")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
