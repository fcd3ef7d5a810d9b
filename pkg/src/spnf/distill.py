"""Depth-prior distillation: local ranking pairs, KNN neighborhoods and their hinge losses.

Pixel indices are flat row-major (``y * W + x``). Loss functions take the
rendered depth as a flat array indexed by those pixel ids; entries that no
pair or neighbor references are never read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DistillConfig:
    patch_size: int = 32
    pairs_per_patch: int = 128
    knn_k: int = 4
    knn_region: int = 6
    margin_rank: float = 1e-4
    margin_conti: float = 1e-4
    patches_per_iter: int = 4
    knn_metric: str = "rank"  # "rank": |rank gap| inside the window; "value": |value gap|

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.knn_region > self.patch_size:
            raise ValueError("knn_region must not exceed patch_size")
        if not 0 <= self.knn_k < self.knn_region**2:
            raise ValueError("knn_k must be smaller than knn_region**2")
        if self.margin_rank < 0 or self.margin_conti < 0:
            raise ValueError("margins must be non-negative")
        if self.knn_metric not in ("rank", "value"):
            raise ValueError("knn_metric must be 'rank' or 'value'")


@dataclass
class PairBatch:
    view: int
    k1: np.ndarray
    k2: np.ndarray
    d1: np.ndarray  # prior values at k1
    d2: np.ndarray
    patch: np.ndarray  # patch number of each pair
    origins: np.ndarray  # (n_patches, 2) top-left (y, x)

    def __len__(self):
        return len(self.k1)

    def pixels(self) -> np.ndarray:
        return np.unique(np.concatenate([self.k1, self.k2]))


@dataclass
class NeighborBatch:
    view: int
    k1: np.ndarray
    k2: list[np.ndarray]

    def terms(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (anchor, neighbor) index arrays, one entry per loss term."""
        counts = np.array([len(n) for n in self.k2], dtype=np.int64)
        if counts.sum() == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        return np.repeat(np.asarray(self.k1, dtype=np.int64), counts), np.concatenate(self.k2).astype(np.int64)

    def pixels(self) -> np.ndarray:
        a, b = self.terms()
        return np.unique(np.concatenate([np.asarray(self.k1, dtype=np.int64), b]))


def _valid_origins(mask: np.ndarray, ps: int) -> np.ndarray:
    """Top-left corners of ps×ps patches containing at least two valid pixels."""
    h, w = mask.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), 0), 1)
    counts = sat[ps:, ps:] - sat[:-ps, ps:] - sat[ps:, :-ps] + sat[:-ps, :-ps]
    return np.argwhere(counts >= 2)


def sample_pairs(prior, cfg: DistillConfig, rng: np.random.Generator, view: int = 0) -> PairBatch:
    """Random near/far pixel pairs inside random local patches, ordered so d1 <= d2."""
    values = np.asarray(prior.values)
    mask = np.asarray(prior.mask, dtype=bool)
    h, w = values.shape
    ps = min(cfg.patch_size, h, w)
    candidates = _valid_origins(mask, ps)
    if len(candidates) == 0:
        raise ValueError("no patch contains two valid prior pixels")
    origins = candidates[rng.integers(len(candidates), size=cfg.patches_per_iter)]

    k1s, k2s, patch_ids = [], [], []
    for p, (oy, ox) in enumerate(origins):
        ys, xs = np.nonzero(mask[oy : oy + ps, ox : ox + ps])
        pix = (ys + oy) * w + (xs + ox)
        n = len(pix)
        i = rng.integers(n, size=cfg.pairs_per_patch)
        j = rng.integers(n - 1, size=cfg.pairs_per_patch)
        j = j + (j >= i)  # distinct from i
        a, b = pix[i], pix[j]
        swap = values.flat[a] > values.flat[b]
        k1s.append(np.where(swap, b, a))
        k2s.append(np.where(swap, a, b))
        patch_ids.append(np.full(cfg.pairs_per_patch, p))
    k1 = np.concatenate(k1s)
    k2 = np.concatenate(k2s)
    return PairBatch(
        view, k1, k2, values.flat[k1].copy(), values.flat[k2].copy(), np.concatenate(patch_ids), origins
    )


def ranking_loss(pairs: PairBatch, d_r: np.ndarray, margin: float) -> float:
    d_r = np.ravel(d_r)
    hinge = d_r[pairs.k1] - d_r[pairs.k2] + margin
    return float(np.mean(np.maximum(hinge, 0.0)))


def ranking_loss_grad(pairs: PairBatch, d_r: np.ndarray, margin: float) -> np.ndarray:
    """Gradient w.r.t. the flat rendered depth; zero at the hinge corner."""
    flat = np.ravel(d_r)
    active = (flat[pairs.k1] - flat[pairs.k2] + margin > 0).astype(flat.dtype) / len(pairs.k1)
    g = np.zeros_like(flat)
    np.add.at(g, pairs.k1, active)
    np.add.at(g, pairs.k2, -active)
    return g.reshape(np.shape(d_r))


def _window_offsets(region: int) -> tuple[np.ndarray, np.ndarray]:
    lo = -(region // 2)
    dy, dx = np.mgrid[lo : lo + region, lo : lo + region]
    return dy.ravel(), dx.ravel()  # row-major, so window order is pixel-index order


def knn_neighbors(prior, anchors, cfg: DistillConfig, view: int = 0) -> NeighborBatch:
    """For each anchor, the ``knn_k`` valid window pixels closest in prior depth.

    Ties are broken by row-major pixel index. With ``knn_metric="rank"`` the
    gap is measured between depth ranks inside the anchor's window, which
    depends only on the prior's ordering.
    """
    values = np.asarray(prior.values, dtype=np.float64)
    mask = np.asarray(prior.mask, dtype=bool)
    h, w = values.shape
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    if len(anchors) == 0:
        return NeighborBatch(view, anchors, [])
    if not mask.flat[anchors].all():
        raise ValueError("knn anchors must be valid prior pixels")
    ay, ax = np.divmod(anchors, w)
    dy, dx = _window_offsets(cfg.knn_region)
    yy = ay[:, None] + dy[None]
    xx = ax[:, None] + dx[None]
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
    usable = inside & mask.flat[idx]
    vals = np.where(usable, values.flat[idx], np.nan)
    anchor_vals = values.flat[anchors]
    if cfg.knn_metric == "rank":
        # rank = number of usable window values strictly below (ties share a rank);
        # NaN compares false, so unusable pixels never count
        ranks = np.sum(vals[:, None, :] < vals[:, :, None], axis=2)
        anchor_rank = np.sum(vals < anchor_vals[:, None], axis=1)
        gap = np.where(usable, np.abs(ranks - anchor_rank[:, None]).astype(np.float64), np.inf)
    else:
        gap = np.where(usable, np.abs(vals - anchor_vals[:, None]), np.inf)
    gap[idx == anchors[:, None]] = np.inf
    order = np.argsort(gap, axis=1, kind="stable")
    neighbors = []
    for r in range(len(anchors)):
        chosen = order[r, : cfg.knn_k]
        chosen = chosen[np.isfinite(gap[r, chosen])]
        neighbors.append(idx[r, chosen])
    return NeighborBatch(view, anchors, neighbors)


def continuity_loss(neighbors: NeighborBatch, d_r: np.ndarray, margin: float) -> float:
    a, b = neighbors.terms()
    if len(a) == 0:
        return 0.0
    flat = np.ravel(d_r)
    return float(np.mean(np.maximum(np.abs(flat[a] - flat[b]) - margin, 0.0)))


def continuity_loss_grad(neighbors: NeighborBatch, d_r: np.ndarray, margin: float) -> np.ndarray:
    flat = np.ravel(d_r)
    g = np.zeros_like(flat)
    a, b = neighbors.terms()
    if len(a) == 0:
        return g.reshape(np.shape(d_r))
    diff = flat[a] - flat[b]
    coef = np.sign(diff) * (np.abs(diff) - margin > 0) / len(a)
    np.add.at(g, a, coef)
    np.add.at(g, b, -coef)
    return g.reshape(np.shape(d_r))


def scaling_loss_and_grad(pairs: PairBatch, prior, d_r: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-patch affine regression of rendered depth onto the prior (depth-scaling baseline).

    For each patch, fit ``w * prior + b`` to the rendered depths of the
    patch's sampled pixels and penalize the mean squared residual; the
    result is averaged over patches. The fit is optimal, so the gradient
    w.r.t. d_r is just the residual term.
    """
    from .metrics import affine_fit

    flat = np.ravel(d_r)
    g = np.zeros_like(flat)
    values = np.ravel(np.asarray(prior.values, dtype=np.float64))
    losses = []
    n_patches = len(pairs.origins)
    for p in range(n_patches):
        sel = pairs.patch == p
        pix = np.unique(np.concatenate([pairs.k1[sel], pairs.k2[sel]]))
        if len(pix) < 2:
            continue
        x = values[pix]
        y = flat[pix].astype(np.float64)
        if np.ptp(x) == 0:
            resid = y - y.mean()
        else:
            wgt, b = affine_fit(x, y)
            resid = y - (wgt * x + b)
        losses.append(np.mean(resid**2))
        g[pix] += (2.0 * resid / len(pix) / n_patches).astype(g.dtype)
    if not losses:
        return 0.0, g.reshape(np.shape(d_r))
    return float(np.sum(losses) / n_patches), g.reshape(np.shape(d_r))


def resample_prior(prior, height: int, width: int):
    """Bilinearly resample a prior to (height, width); a pixel stays valid only if all taps are valid."""
    from .scene_io import DepthPrior

    values = np.asarray(prior.values, dtype=np.float64)
    mask = np.asarray(prior.mask, dtype=bool)
    h, w = values.shape
    if (h, w) == (height, width):
        return prior
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v = np.where(mask, values, 0.0)

    def interp(a):
        return (
            a[y0][:, x0] * (1 - fy) * (1 - fx)
            + a[y0][:, x1] * (1 - fy) * fx
            + a[y1][:, x0] * fy * (1 - fx)
            + a[y1][:, x1] * fy * fx
        )

    new_mask = mask[y0][:, x0] & mask[y0][:, x1] & mask[y1][:, x0] & mask[y1][:, x1]
    return DepthPrior(np.clip(interp(v), 0, 1), new_mask, prior.source)
