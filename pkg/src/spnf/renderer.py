"""Ray sampling and differentiable alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera, pixel_rays
from .field import FieldParams, field_backward, field_forward

DEFAULT_SAMPLES = 64


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.t_near < self.t_far:
            raise ValueError("need 0 < t_near < t_far")


@dataclass
class RaySamples:
    t: np.ndarray
    delta: np.ndarray


@dataclass
class RenderedPixel:
    color: np.ndarray
    depth: float
    weights: np.ndarray
    opacity: float

    @property
    def normalized_depth(self) -> float:
        """Depth divided by opacity; diagnostic only."""
        return self.depth / self.opacity if self.opacity > 0 else 0.0


@dataclass
class RenderBatch:
    """Per-ray outputs for R rays: color (R, 3), depth (R,), weights (R, N), opacity (R,)."""

    color: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    opacity: np.ndarray

    def normalized_depth(self, eps: float = 1e-10) -> np.ndarray:
        return self.depth / np.maximum(self.opacity, eps)


def generate_ray(camera: Camera, px, jitter=(0.5, 0.5)) -> Ray:
    origins, dirs = pixel_rays(camera, np.asarray(px)[None], np.asarray(jitter)[None])
    return Ray(origins[0], dirs[0], camera.near, camera.far)


def stratified_t(near, far, n: int, u: np.ndarray | None = None):
    """Bin-stratified distances for R rays; ``u`` (R, n) in [0, 1) or None for midpoints.

    Returns (t, delta), each (R, n), with delta[:, 0] = t[:, 0] - near.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    near, far = np.broadcast_arrays(near, far)
    offs = 0.5 if u is None else np.asarray(u, dtype=np.float64)
    bins = np.arange(n, dtype=np.float64) + offs
    t = near[:, None] + (far - near)[:, None] * bins / n
    delta = np.diff(t, axis=1, prepend=np.broadcast_to(near[:, None], (t.shape[0], 1)))
    return t, delta


def stratified_sample(ray: Ray, n: int, rng: np.random.Generator | None = None) -> RaySamples:
    u = None if rng is None else rng.random((1, n))
    t, delta = stratified_t(ray.t_near, ray.t_far, n, u)
    return RaySamples(t[0], delta[0])


def composite_batch(t, delta, sigma, rgb):
    """Alpha-composite R rays of N samples. Returns (RenderBatch, aux) where aux feeds the backward."""
    if t.shape != sigma.shape or delta.shape != sigma.shape or rgb.shape != sigma.shape + (3,):
        raise ValueError("sample arrays have mismatched shapes")
    if (sigma < 0).any():
        raise ValueError("negative density")
    tau = sigma * delta
    excl = np.zeros_like(tau)
    np.cumsum(tau[..., :-1], axis=-1, out=excl[..., 1:])  # exact exclusive sum keeps T monotone
    trans = np.exp(-excl)
    alpha = -np.expm1(-tau)
    w = trans * alpha
    color = np.einsum("rn,rnc->rc", w, rgb)
    depth = np.sum(w * t, axis=-1)
    opacity = np.sum(w, axis=-1)
    return RenderBatch(color, depth, w, opacity), (trans, tau)


def composite_backward(t, delta, rgb, out: RenderBatch, aux, g_color, g_depth, g_opacity=None):
    """Cotangents on (color, depth[, opacity]) -> cotangents on (sigma, rgb)."""
    trans, tau = aux
    w = out.weights
    g_w = np.einsum("rc,rnc->rn", g_color, rgb) + g_depth[:, None] * t
    if g_opacity is not None:
        g_w = g_w + g_opacity[:, None]
    g_rgb = w[..., None] * g_color[:, None, :]
    # d w_i / d tau_k = T_{k+1} if i == k, -w_i if i > k
    trans_next = trans * np.exp(-tau)
    gw_w = g_w * w
    suffix = np.cumsum(gw_w[:, ::-1], axis=-1)[:, ::-1] - gw_w
    g_tau = g_w * trans_next - suffix
    return g_tau * delta, g_rgb


def composite(samples: RaySamples, sigmas, colors) -> RenderedPixel:
    sigmas = np.asarray(sigmas)
    out, _ = composite_batch(samples.t[None], samples.delta[None], sigmas[None], np.asarray(colors)[None])
    return RenderedPixel(out.color[0], float(out.depth[0]), out.weights[0], float(out.opacity[0]))


def render_rays(params: FieldParams, origins, dirs, t, delta, keep_cache: bool = False):
    """Render R rays at sample distances ``t`` (R, N). Optionally keep state for :func:`render_backward`."""
    dtype = params.dtype
    origins = np.asarray(origins, dtype=dtype)
    dirs = np.asarray(dirs, dtype=dtype)
    t = np.asarray(t, dtype=dtype)
    delta = np.asarray(delta, dtype=dtype)
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    res = field_forward(params, x, dirs, keep_cache=keep_cache)
    fo, fcache = res if keep_cache else (res, None)
    out, aux = composite_batch(t, delta, fo.sigma, fo.color)
    if not keep_cache:
        return out
    return out, (t, delta, fo.color, out, aux, fcache)


def render_backward(params: FieldParams, cache, g_color, g_depth) -> dict[str, np.ndarray]:
    t, delta, rgb, out, aux, fcache = cache
    dtype = params.dtype
    g_sigma, g_rgb = composite_backward(
        t, delta, rgb, out, aux, np.asarray(g_color, dtype=dtype), np.asarray(g_depth, dtype=dtype)
    )
    return field_backward(params, fcache, g_sigma, g_rgb)


def render_pixel(params: FieldParams, ray: Ray, n: int = DEFAULT_SAMPLES, rng=None) -> RenderedPixel:
    samples = stratified_sample(ray, n, rng)
    fo = field_forward(params, ray.origin[None, None] + samples.t[None, :, None] * ray.direction, ray.direction[None])
    return composite(samples, fo.sigma[0], fo.color[0])


def render_image(params: FieldParams, camera: Camera, n: int = DEFAULT_SAMPLES, chunk: int = 1024) -> RenderBatch:
    """Render every pixel center of ``camera``; fields are reshaped to (H, W, ...)."""
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width]
    px = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    parts = []
    for s in range(0, len(px), chunk):
        o, d = pixel_rays(camera, px[s : s + chunk])
        t, delta = stratified_t(camera.near, camera.far, n)
        t = np.broadcast_to(t, (len(o), n))
        delta = np.broadcast_to(delta, (len(o), n))
        parts.append(render_rays(params, o, d, t, delta))
    h, w = camera.height, camera.width
    return RenderBatch(
        np.concatenate([p.color for p in parts]).reshape(h, w, 3),
        np.concatenate([p.depth for p in parts]).reshape(h, w),
        np.concatenate([p.weights for p in parts]).reshape(h, w, n),
        np.concatenate([p.opacity for p in parts]).reshape(h, w),
    )


def constraint_budget(h: int, w: int, k: int) -> int:
    """Edge length of the largest cube whose voxel count fits h*w*k ray constraints."""
    if min(h, w, k) <= 0:
        raise ValueError("dimensions must be positive")
    total = h * w * k
    n = int(round(total ** (1.0 / 3.0)))
    while n**3 > total:
        n -= 1
    while (n + 1) ** 3 <= total:
        n += 1
    return n
