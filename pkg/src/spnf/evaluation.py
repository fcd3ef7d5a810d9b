"""Render held-out views and score them."""

from __future__ import annotations

import math

import numpy as np

from .field import FieldParams
from .metrics import psnr, scale_invariant_depth_error, ssim
from .renderer import DEFAULT_SAMPLES, RenderBatch, render_image
from .scene_io import Scene

OPACITY_THRESHOLD = 0.5


def depth_error_for_view(rendered: RenderBatch, gt_depth: np.ndarray):
    """Scale-invariant error of the opacity-normalized depth on pixels with opacity > 0.5.

    Returns None when fewer than two pixels qualify or the prediction is flat.
    """
    mask = rendered.opacity > OPACITY_THRESHOLD
    if mask.sum() < 2:
        return None
    d_hat = rendered.normalized_depth()
    if np.ptp(d_hat[mask]) == 0:
        return None
    return scale_invariant_depth_error(d_hat, gt_depth, mask)


def evaluate(params: FieldParams, scene: Scene, view_ids, n_samples: int = DEFAULT_SAMPLES, keep_renders=False):
    """Per-view {psnr, ssim, depth_error, n_valid} plus aggregate means under ``"mean"``."""
    report: dict = {}
    renders = {}
    for v in view_ids:
        out = render_image(params, scene.cameras[v], n_samples)
        color = np.clip(out.color, 0.0, 1.0)
        entry = {"psnr": psnr(color, scene.images[v]), "ssim": ssim(color, scene.images[v]),
                 "depth_error": None, "n_valid": 0}
        if scene.gt_depth is not None:
            rep = depth_error_for_view(out, scene.gt_depth[v])
            if rep is not None:
                entry["depth_error"] = rep.error
                entry["n_valid"] = rep.n_valid
        report[str(v)] = entry
        if keep_renders:
            renders[v] = out
    report["mean"] = aggregate(report)
    return (report, renders) if keep_renders else report


def aggregate(report: dict) -> dict:
    rows = [r for k, r in report.items() if k != "mean"]

    def mean_of(key):
        vals = [r[key] for r in rows if r[key] is not None and math.isfinite(r[key])]
        return float(np.mean(vals)) if vals else None

    return {"psnr": mean_of("psnr"), "ssim": mean_of("ssim"), "depth_error": mean_of("depth_error"),
            "n_valid": int(sum(r["n_valid"] for r in rows))}
