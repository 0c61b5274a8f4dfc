"""Figure rendering for the report paths.

Every CLI command that writes a delimited report also drops a PNG next to
it; plotting is kept separate so the library never imports matplotlib
unless figures are requested.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_history(history, path) -> None:
    """Train/validation loss curves over epochs."""
    epochs = [row[0] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row[1] for row in history], label="train")
    ax.plot(epochs, [row[2] for row in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_evaluation(jaccard_by_label: dict, interface_mm: dict, path) -> None:
    """Per-label overlap bars and interface-distance bars, side by side."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    if jaccard_by_label:
        labels = sorted(jaccard_by_label)
        ax1.bar([str(l) for l in labels], [jaccard_by_label[l] for l in labels])
        ax1.set_ylim(0, 1)
    ax1.set_xlabel("label")
    ax1.set_ylabel("Jaccard index")
    ax1.set_title("segmentation overlap")
    if interface_mm:
        pairs = sorted(interface_mm)
        ax2.bar([f"{a}-{b}" for a, b in pairs], [interface_mm[p] for p in pairs])
        ax2.tick_params(axis="x", rotation=60)
    ax2.set_xlabel("region pair")
    ax2.set_ylabel("surface distance (mm)")
    ax2.set_title("interface distance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
