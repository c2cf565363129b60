"""Matplotlib figures for the CLI report outputs.

Everything renders through the Agg backend with PNG metadata stripped, so
the same inputs give byte-identical files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path):
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def loss_curves(history, path):
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax.plot(history.epoch, history.train_loss, marker="o", label="train")
    ax.plot(history.epoch, history.val_loss, marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    bx.plot(history.epoch, history.metric, marker="o", color="tab:green")
    bx.set_xlabel("epoch")
    bx.set_ylabel(history.metric_name or "metric")
    fig.tight_layout()
    return _save(fig, path)


def latent_scatter(points, classes, names, path):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    if classes is None:
        ax.scatter(points[:, 0], points[:, 1], s=6)
    else:
        for c in np.unique(classes):
            sel = classes == c
            label = names[c] if names is not None and c < len(names) else str(c)
            ax.scatter(points[sel, 0], points[sel, 1], s=6, label=label)
        ax.legend(markerscale=2, fontsize=8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    return _save(fig, path)


def ensemble_panels(mean, std, mask, path, index=0):
    """Mean probability, spread and kept mask for one tile."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, title, cmap in zip(axes, (mean[index], std[index], mask[index]),
                                    ("mean", "std", "kept"), ("viridis", "magma", "gray")):
        im = ax.imshow(img, cmap=cmap, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def tile_grid(images, path, cols=8):
    n = len(images)
    cols = min(cols, n)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.2, rows * 1.2), squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k < n:
            ax.imshow(images[k, 0], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    fig.tight_layout(pad=0.2)
    return _save(fig, path)
