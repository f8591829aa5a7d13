"""Matplotlib figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .analysis import REGION_PALETTE  # noqa: E402
from .data import REGION_NAMES  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def heatmap(path, lat, lon, values, title: str = "", categorical: bool = False,
            label: str = "distance") -> Path:
    """Scatter the field on its coordinates; blue is low, red is high."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if categorical:
            ids = sorted(REGION_PALETTE)
            cmap = ListedColormap([np.array(REGION_PALETTE[i]) / 255 for i in ids])
            sc = ax.scatter(lon, lat, c=values, cmap=cmap, vmin=-0.5, vmax=len(ids) - 0.5,
                            s=4, marker="s", linewidths=0)
            cb = fig.colorbar(sc, ax=ax, ticks=ids)
            cb.ax.set_yticklabels([f"{i} {REGION_NAMES[i]}" for i in ids])
        else:
            sc = ax.scatter(lon, lat, c=values, cmap="bwr", s=4, marker="s", linewidths=0)
            fig.colorbar(sc, ax=ax, label=label)
        ax.set_xlabel("longitude")
        ax.set_ylabel("latitude")
        ax.set_title(title)
        ax.set_aspect("equal", adjustable="datalim")
        return _save(fig, path)


def training_curves(path, epoch_log: list[dict], title: str = "") -> Path:
    epochs = [e["epoch"] for e in epoch_log]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        ax1.plot(epochs, [e["train_loss"] for e in epoch_log], label="train")
        ax1.plot(epochs, [e["val_loss"] for e in epoch_log], label="validation")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("total loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [e["train_regression_term"] for e in epoch_log], color="C2")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("normalized residual")
        ax2.set_ylim(0, 1.05)
        lr_axis = ax2.twinx()
        lr_axis.step(epochs, [e["lr"] for e in epoch_log], where="post", color="0.5", lw=0.8)
        lr_axis.set_yscale("log")
        lr_axis.set_ylabel("learning rate")
        fig.suptitle(title)
        return _save(fig, path)


def grid_summary(path, header: list[str], rows: list[list[str]], title: str = "") -> Path:
    """Grouped bars: one group per test region, one bar per method."""
    regions = header[2:]
    methods = [r[0] for r in rows]
    values = np.array([[float(v) if v != "failed" else np.nan for v in r[2:]] for r in rows])
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.5, 3))
        x = np.arange(len(regions))
        for i, method in enumerate(methods):
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, values[i], width, label=method)
        ax.set_xticks(x, [f"region {r}" for r in regions])
        ax.set_ylabel(rows[0][1].replace("_", " ") if rows else "accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=2, bbox_to_anchor=(1.0, 1.0), loc="upper left")
        ax.set_title(title)
        return _save(fig, path)
