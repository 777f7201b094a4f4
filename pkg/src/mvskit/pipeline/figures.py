"""Matplotlib renderings written next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ..depthestimate import DepthMap
from ..evaluation import DepthReport


def save_depth_figure(dm: DepthMap, path, title: str | None = None) -> None:
    """Color-mapped depth preview with invalid pixels greyed out."""
    shown = np.ma.masked_where(~dm.valid, dm.depth)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(shown, cmap="turbo")
    im.cmap.set_bad(color="0.75")
    fig.colorbar(im, ax=ax, label="depth [scene units]")
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_report_figure(report: DepthReport, path) -> None:
    """Per-image rel and tau bars next to the averaged metrics."""
    names = [m.image_id for m in report.per_image]
    rel = [m.abs_rel for m in report.per_image]
    tau = [m.tau for m in report.per_image]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6.0, 1.1 * len(names) + 3), 4.0))
    ax1.bar(x, rel, color="#3567a8")
    ax1.axhline(report.abs_rel, color="k", linestyle="--", linewidth=1, label="average")
    ax1.set_ylabel("abs rel")
    ax2.bar(x, tau, color="#4a9c64")
    ax2.axhline(report.tau, color="k", linestyle="--", linewidth=1, label="average")
    ax2.set_ylabel("inlier ratio [%]")
    ax2.set_ylim(0, 100)
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_mesh_distance_figure(
    pred_to_gt: np.ndarray, gt_to_pred: np.ndarray, thresh: float, path
) -> None:
    """Histograms of nearest-neighbor distances in both directions."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, d, name in ((ax1, pred_to_gt, "pred to GT"), (ax2, gt_to_pred, "GT to pred")):
        ax.hist(d, bins=60, color="#888", edgecolor="none")
        ax.axvline(thresh, color="r", linestyle="--", linewidth=1, label=f"thresh {thresh}")
        ax.set_xlabel(f"distance ({name})")
        ax.legend(fontsize=8)
    ax1.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_scene_overview(path, images: dict[str, np.ndarray], cols: int = 4) -> None:
    """Contact sheet of grayscale frames, used by the synth command."""
    names = list(images)
    rows = (len(names) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.0 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, name in zip(axes.ravel(), names):
        ax.imshow(images[name], cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
