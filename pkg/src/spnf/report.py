"""Matplotlib figures written next to an evaluation report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import OPACITY_THRESHOLD  # noqa: E402


def _depth_panel(ax, depth, mask, title, vmin, vmax):
    shown = np.where(mask, depth, np.nan)
    im = ax.imshow(shown, cmap="viridis", vmin=vmin, vmax=vmax)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    return im


def view_figure(path, view: int, gt_image, gt_depth, rendered, entry: dict):
    """Ground truth vs rendered color and depth for one view."""
    has_depth = gt_depth is not None
    ncols = 4 if has_depth else 2
    fig, axes = plt.subplots(1, ncols, figsize=(2.6 * ncols, 2.8))
    axes[0].imshow(np.clip(gt_image, 0, 1))
    axes[0].set_title(f"view {view}: ground truth", fontsize=9)
    axes[1].imshow(np.clip(rendered.color, 0, 1))
    axes[1].set_title(f"rendered, {entry['psnr']:.2f} dB", fontsize=9)
    for ax in axes[:2]:
        ax.axis("off")
    if has_depth:
        mask = rendered.opacity > OPACITY_THRESHOLD
        lo, hi = float(gt_depth.min()), float(gt_depth.max())
        _depth_panel(axes[2], gt_depth, np.ones_like(mask), "analytic depth", lo, hi)
        err = entry.get("depth_error")
        label = "rendered depth" if err is None else f"rendered depth, si-mse {err:.4f}"
        im = _depth_panel(axes[3], rendered.normalized_depth(), mask, label, lo, hi)
        fig.colorbar(im, ax=axes[3], fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def metrics_figure(path, report: dict):
    views = [k for k in report if k != "mean"]
    keys = [k for k in ("psnr", "ssim", "depth_error") if any(report[v][k] is not None for v in views)]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8))
    axes = np.atleast_1d(axes)
    for ax, key in zip(axes, keys):
        vals = [report[v][key] if report[v][key] is not None else np.nan for v in views]
        ax.bar(views, vals, color="0.5")
        ax.set_title(key, fontsize=9)
        ax.set_xlabel("view")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_figures(directory, scene, renders: dict, report: dict) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for v, out in renders.items():
        path = directory / f"view_{v:03d}.png"
        gt_depth = None if scene.gt_depth is None else scene.gt_depth[v]
        view_figure(path, v, scene.images[v], gt_depth, out, report[str(v)])
        written.append(path)
    path = directory / "metrics.png"
    metrics_figure(path, report)
    written.append(path)
    return written
