"""Figure rendering for training runs and channel visualizations.

All figures go straight to files via the Agg backend; nothing here opens a
window.  The quantitative outputs (CSV, PGM, checkpoints) never depend on
this module — figures are a human-facing convenience layer.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def save_training_curves(rows: list[dict], path) -> None:
    """Two-panel summary: loss components and evaluation metrics per epoch."""
    epochs = [r["step"] for r in rows]
    fig, (ax_loss, ax_eval) = plt.subplots(1, 2, figsize=(11, 4))

    for key, style in (("ce", "-"), ("mc_high", "--"), ("mc_mid", ":"),
                       ("total", "-.")):
        ax_loss.plot(epochs, [r[key] for r in rows], style, label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("training loss components")
    ax_loss.legend(fontsize=8)
    ax_loss.grid(alpha=0.3)

    for key, label in (("test_acc", "accuracy"),
                       ("align_acc", "channel alignment"),
                       ("containment", "mask containment")):
        vals = [r[key] for r in rows]
        if all(np.isfinite(v) for v in vals):
            ax_eval.plot(epochs, vals, label=label)
    ax_eval.set_xlabel("epoch")
    ax_eval.set_ylim(0, 1)
    ax_eval.set_title("test metrics")
    ax_eval.legend(fontsize=8)
    ax_eval.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)


def save_channel_grid(maps: list[tuple[str, np.ndarray]], path,
                      ncols: int | None = None) -> None:
    """Grayscale grid of named 2-D maps, one subplot per map."""
    if not maps:
        raise ValueError("no maps to render")
    n = len(maps)
    ncols = ncols or min(n, 6)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.1 * ncols, 2.3 * nrows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (title, arr) in zip(axes.ravel(), maps):
        ax.imshow(np.asarray(arr), cmap="gray", interpolation="nearest")
        ax.set_title(title, fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)
