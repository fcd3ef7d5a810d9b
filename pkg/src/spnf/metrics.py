"""PSNR, SSIM and the scale-invariant depth error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class DepthErrorReport:
    w: float
    b: float
    error: float
    n_valid: int


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only positions where the window fits
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels and all window positions that fit inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def affine_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares (w, b) minimizing ||w x + b - y||^2 via the 2x2 normal equations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # centered form of the normal equations
    mx, my = x.mean(), y.mean()
    xc = x - mx
    sxx = np.dot(xc, xc)
    if sxx == 0:
        raise ValueError("affine fit is degenerate: predictor is constant")
    w = np.dot(xc, y - my) / sxx
    return float(w), float(my - w * mx)


def scale_invariant_depth_error(d_hat: np.ndarray, d: np.ndarray, mask: np.ndarray | None = None) -> DepthErrorReport:
    """Mean squared residual of the best affine map from ``d_hat`` onto ``d`` over valid pixels."""
    d_hat = np.asarray(d_hat, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if d_hat.shape != d.shape:
        raise ValueError("depth maps differ in shape")
    valid = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x, y = d_hat[valid], d[valid]
    if x.size < 2:
        raise ValueError("need at least two valid pixels")
    w, b = affine_fit(x, y)
    err = float(np.mean((w * x + b - y) ** 2))
    return DepthErrorReport(w, b, err, int(x.size))
