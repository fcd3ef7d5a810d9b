"""Scene loading/writing, view selection, depth-prior canonicalization and synthetic scenes.

Canonical prior convention: values in [0, 1], larger = farther, with a
boolean validity mask. Every loss downstream reads only the ordering of
valid values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_utils
from .cameras import Camera, look_at, pixel_rays

PRIOR_SOURCES = ("sensor", "model", "analytic")
PRESETS = ("two-planes", "sphere-on-plane")


class SceneFormatError(ValueError):
    """Raised when a scene directory does not follow the expected layout."""


@dataclass
class DepthPrior:
    values: np.ndarray  # (H, W) float32
    mask: np.ndarray  # (H, W) bool, True = valid
    source: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("prior values and mask differ in shape")
        if self.source not in PRIOR_SOURCES:
            raise ValueError(f"unknown prior source {self.source!r}")
        v = self.values[self.mask]
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("canonical prior values must lie in [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, DepthPrior):
            return NotImplemented
        return (
            self.source == other.source
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[self.mask], other.values[self.mask])
        )


@dataclass
class Scene:
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3) float32 in [0, 1]
    priors: list[DepthPrior] | None = None
    gt_depth: np.ndarray | None = None  # (V, H, W) float32, synthetic scenes only
    depth_scale: int = 65535
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError("images must be (V, H, W, 3)")
        if len(self.cameras) != len(self.images):
            raise ValueError("one camera per image required")
        h, w = self.images.shape[1:3]
        for cam in self.cameras:
            if (cam.height, cam.width) != (h, w):
                raise ValueError("camera size does not match image size")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        if self.priors is not None:
            if len(self.priors) != len(self.images):
                raise ValueError("one prior per view required")
            for p in self.priors:
                if p.values.shape != (h, w):
                    raise ValueError(f"prior shape {p.values.shape} does not match image {(h, w)}")
        if self.gt_depth is not None:
            self.gt_depth = np.asarray(self.gt_depth, dtype=np.float32)
            if self.gt_depth.shape != self.images.shape[:3]:
                raise ValueError("gt_depth shape does not match images")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if self.cameras != other.cameras or not np.array_equal(self.images, other.images):
            return False
        if (self.priors is None) != (other.priors is None) or (self.gt_depth is None) != (other.gt_depth is None):
            return False
        if self.priors is not None and self.priors != other.priors:
            return False
        return self.gt_depth is None or np.array_equal(self.gt_depth, other.gt_depth)


# ---------------------------------------------------------------------------
# prior canonicalization


def normalize_sensor_depth(raw: np.ndarray, clip: float, mask: np.ndarray | None = None) -> DepthPrior:
    """Mask zero readings, clip the far range and scale to (0, 1]."""
    if clip <= 0:
        raise ValueError("clip distance must be positive")
    raw = np.asarray(raw, dtype=np.float64)
    valid = (raw > 0) & np.isfinite(raw)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("sensor depth has no valid pixels")
    values = np.where(valid, np.minimum(np.where(valid, raw, 0.0), clip) / clip, 0.0)
    return DepthPrior(values, valid, "sensor")


def normalize_model_depth(raw_disparity: np.ndarray, mask: np.ndarray | None = None) -> DepthPrior:
    """Relative inverse depth (larger = nearer) to the canonical convention via negation + min-max."""
    disp = np.asarray(raw_disparity, dtype=np.float64)
    if not np.isfinite(disp).all():
        raise ValueError("disparity map contains non-finite values")
    valid = np.ones(disp.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    neg = -disp
    lo, hi = neg[valid].min(), neg[valid].max()
    if hi == lo:
        raise ValueError("constant disparity map: ordering undefined")
    values = np.where(valid, (neg - lo) / (hi - lo), 0.0)
    return DepthPrior(values, valid, "model")


def normalize_analytic_depth(raw: np.ndarray, mask: np.ndarray | None = None) -> DepthPrior:
    """Values already canonical; clamp into [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    valid = np.isfinite(raw)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return DepthPrior(np.where(valid, np.clip(raw, 0.0, 1.0), 0.0), valid, "analytic")


# ---------------------------------------------------------------------------
# view selection


def select_views(n_total: int, k_train: int) -> tuple[list[int], list[int]]:
    """Hold out every 8th view; pick ``k_train`` evenly spaced views from the rest."""
    if k_train < 1:
        raise ValueError("k_train must be >= 1")
    test = list(range(0, n_total, 8))
    pool = [i for i in range(n_total) if i % 8 != 0]
    if k_train > len(pool):
        raise ValueError(f"cannot pick {k_train} training views from a pool of {len(pool)}")
    P = len(pool)
    if k_train == 1:
        picks = [math.floor((P - 1) / 2 + 0.5)]
    else:
        picks = [math.floor(i * (P - 1) / (k_train - 1) + 0.5) for i in range(k_train)]
    return [pool[i] for i in picks], test


# ---------------------------------------------------------------------------
# disk format


def _decode_depth(path: Path, scale: int) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return io_utils.read_pfm(path)
    return io_utils.read_gray16_png(path) / float(scale)


def load_scene(directory) -> Scene:
    directory = Path(directory)
    meta_path = directory / "cameras.json"
    if not meta_path.is_file():
        raise SceneFormatError(f"{directory}: missing cameras.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("width", "height", "fx", "fy", "cx", "cy", "frames"):
        if key not in meta:
            raise SceneFormatError(f"{meta_path}: missing key {key!r}")
    scale = int(meta.get("depth_scale", 1000))
    source = meta.get("depth_source", "sensor")
    if source not in PRIOR_SOURCES:
        raise SceneFormatError(f"{meta_path}: unknown depth_source {source!r}")
    h, w = int(meta["height"]), int(meta["width"])

    cameras, images, priors, gts = [], [], [], []
    for i, fr in enumerate(meta["frames"]):
        cameras.append(
            Camera(w, h, float(meta["fx"]), float(meta["fy"]), float(meta["cx"]), float(meta["cy"]),
                   np.array(fr["transform"], dtype=np.float64).reshape(4, 4),
                   float(fr["near"]), float(fr["far"]))
        )
        img = io_utils.read_rgb_png(directory / fr["image"])
        if img.shape[:2] != (h, w):
            raise SceneFormatError(f"{fr['image']}: image is {img.shape[1]}x{img.shape[0]}, expected {w}x{h}")
        images.append(img)

        mask = None
        if fr.get("mask"):
            mask = io_utils.read_mask_png(directory / fr["mask"])
            if mask.shape != (h, w):
                raise SceneFormatError(f"{fr['mask']}: mask size does not match image")
        if fr.get("depth"):
            raw = _decode_depth(directory / fr["depth"], scale)
            if raw.shape != (h, w):
                raise SceneFormatError(f"{fr['depth']}: depth is {raw.shape[1]}x{raw.shape[0]}, expected {w}x{h}")
            if source == "sensor":
                clip = float(meta.get("depth_clip", raw.max() if raw.max() > 0 else 1.0))
                priors.append(normalize_sensor_depth(raw, clip, mask))
            elif source == "model":
                priors.append(normalize_model_depth(raw, mask))
            else:
                priors.append(normalize_analytic_depth(raw, mask))
        else:
            priors.append(None)
        if fr.get("gt_depth"):
            gts.append(io_utils.read_pfm(directory / fr["gt_depth"]).astype(np.float32))
        else:
            gts.append(None)

    if any(p is None for p in priors) and not all(p is None for p in priors):
        raise SceneFormatError(f"{meta_path}: depth given for some frames but not all")
    if any(g is None for g in gts) and not all(g is None for g in gts):
        raise SceneFormatError(f"{meta_path}: gt_depth given for some frames but not all")
    return Scene(
        cameras,
        np.stack(images),
        priors=None if priors and priors[0] is None else priors or None,
        gt_depth=None if not gts or gts[0] is None else np.stack(gts),
        depth_scale=scale,
        meta={k: v for k, v in meta.items() if k not in ("frames",)},
    )


def write_scene(scene: Scene, directory) -> Path:
    """Write ``scene`` in the on-disk layout read by :func:`load_scene`.

    Priors are stored as 16-bit PNG codes of their canonical values, so
    the declared source is ``analytic`` unless the scene says otherwise.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = scene.hw
    cam0 = scene.cameras[0]
    source = scene.priors[0].source if scene.priors else "analytic"
    scale = 65535
    frames = []
    for i, cam in enumerate(scene.cameras):
        fr = {
            "image": f"images/{i:03d}.png",
            "depth": None,
            "mask": None,
            "transform": [float(v) for v in cam.cam_to_world.ravel()],
            "near": float(cam.near),
            "far": float(cam.far),
        }
        io_utils.write_rgb_png(directory / fr["image"], scene.images[i])
        if scene.priors is not None:
            prior = scene.priors[i]
            if prior.source != "analytic":
                raise ValueError("only canonical (analytic) priors can be written back losslessly")
            fr["depth"] = f"depth/{i:03d}.png"
            fr["mask"] = f"masks/{i:03d}.png"
            io_utils.write_gray16_png(directory / fr["depth"], np.where(prior.mask, prior.values, 0) * scale)
            io_utils.write_mask_png(directory / fr["mask"], prior.mask)
        if scene.gt_depth is not None:
            fr["gt_depth"] = f"gt_depth/{i:03d}.pfm"
            io_utils.write_pfm(directory / fr["gt_depth"], scene.gt_depth[i])
        frames.append(fr)
    meta = {
        "width": w,
        "height": h,
        "fx": float(cam0.fx),
        "fy": float(cam0.fy),
        "cx": float(cam0.cx),
        "cy": float(cam0.cy),
        "depth_scale": scale,
        "depth_source": source,
        "frames": frames,
    }
    for k, v in scene.meta.items():
        meta.setdefault(k, v)
    io_utils.atomic_write_text(directory / "cameras.json", json.dumps(meta, indent=2))
    return directory


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class PriorDistortion:
    exponent: float = 1.5
    noise: float = 0.02

    def apply(self, depth01: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        warped = depth01**self.exponent
        if self.noise > 0:
            warped = warped + rng.uniform(-self.noise, self.noise, size=depth01.shape)
        return np.clip(warped, 0.0, 1.0)


def _plane_hit(origins, dirs, normal, offset):
    """Distance along each ray to the plane ``normal . p = offset`` (inf when missed)."""
    nd = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - origins @ normal) / nd
    return np.where((t > 1e-9) & np.isfinite(t), t, np.inf)


def _texture(u, v, coeffs):
    """Smooth procedural albedo from a handful of seeded sinusoids."""
    out = np.zeros(u.shape + (3,))
    base, waves = coeffs
    out += base
    for fu, fv, phase, amp in waves:
        out += amp * np.sin(fu * u + fv * v + phase)[..., None]
    return np.clip(out, 0.02, 0.98)


def _texture_coeffs(rng, n_waves=5, max_freq=9.0):
    base = rng.uniform(0.25, 0.75, size=3)
    waves = [
        (rng.uniform(-max_freq, max_freq), rng.uniform(-max_freq, max_freq), rng.uniform(0, 2 * np.pi),
         rng.uniform(0.04, 0.12, size=3))
        for _ in range(n_waves)
    ]
    return base, waves


def _shade(albedo, normal, light):
    lambert = max(0.0, float(normal @ light))
    return np.clip(albedo * (0.35 + 0.65 * lambert), 0.0, 1.0)


def _trace_two_planes(origins, dirs, rng):
    # a concave corner: two vertical walls meeting along the y axis, opening toward +z
    beta = np.deg2rad(45.0)
    normals = [np.array([np.sin(beta), 0.0, np.cos(beta)]), np.array([-np.sin(beta), 0.0, np.cos(beta)])]
    tangents = [np.array([-np.cos(beta), 0.0, np.sin(beta)]), np.array([np.cos(beta), 0.0, np.sin(beta)])]
    light = np.array([0.3, 0.5, 0.8])
    light /= np.linalg.norm(light)
    coeffs = [_texture_coeffs(rng), _texture_coeffs(rng)]
    hits = np.stack([_plane_hit(origins, dirs, n, 0.0) for n in normals])
    which = np.argmin(hits, axis=0)
    depth = hits.min(axis=0)
    color = np.zeros(depth.shape + (3,))
    for k in range(2):
        sel = which == k
        p = origins[sel] + depth[sel, None] * dirs[sel]
        alb = _texture(p @ tangents[k], p[:, 1], coeffs[k])
        color[sel] = _shade(alb, normals[k], light)
    return depth, color


def _trace_sphere_on_plane(origins, dirs, rng):
    floor_y = -0.5
    radius = 0.45
    center = np.array([0.0, floor_y + radius, 0.0])
    light = np.array([0.4, 0.8, 0.45])
    light /= np.linalg.norm(light)
    floor_coeffs, sphere_coeffs = _texture_coeffs(rng), _texture_coeffs(rng)

    t_floor = _plane_hit(origins, dirs, np.array([0.0, 1.0, 0.0]), floor_y)
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t_sph = -b - np.sqrt(disc)
    t_sph = np.where((disc > 0) & (t_sph > 1e-9), t_sph, np.inf)

    depth = np.minimum(t_floor, t_sph)
    color = np.zeros(depth.shape + (3,))
    on_sphere = t_sph < t_floor
    p = origins + depth[:, None] * dirs
    fl = ~on_sphere
    color[fl] = _shade(_texture(p[fl, 0], p[fl, 2], floor_coeffs), np.array([0.0, 1.0, 0.0]), light)
    if on_sphere.any():
        ps = p[on_sphere]
        n = (ps - center) / radius
        alb = _texture(np.arctan2(n[:, 0], n[:, 2]) * radius, ps[:, 1], sphere_coeffs)
        lam = np.clip(n @ light, 0.0, None)[:, None]
        color[on_sphere] = np.clip(alb * (0.35 + 0.65 * lam), 0.0, 1.0)
    return depth, color


def _arc_poses(preset: str, n_views: int, arc_deg: float):
    angles = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n_views))
    poses = []
    for a in angles:
        if preset == "two-planes":
            r = 2.5
            eye = np.array([r * np.sin(a), 0.15 * np.cos(3 * a), r * np.cos(a)])
            target = np.array([0.0, 0.0, 0.0])
        else:
            r = 1.8
            eye = np.array([r * np.sin(a), 2.0, r * np.cos(a)])
            target = np.array([0.0, -0.5, 0.0])
        poses.append(look_at(eye, target))
    return poses


def make_synthetic_scene(
    preset: str = "two-planes",
    n_views: int = 9,
    resolution: int = 64,
    seed: int = 0,
    distortion: PriorDistortion | None = PriorDistortion(),
    arc_deg: float = 40.0,
) -> Scene:
    """Ray-trace a Lambertian scene with exact depth and coarse ranking-preserving priors.

    Images and priors are quantized to 8 and 16 bits so a written scene
    reloads bit-exactly.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if n_views < 3:
        raise ValueError("n_views must be >= 3")
    rng = np.random.default_rng(seed)
    tracer = _trace_two_planes if preset == "two-planes" else _trace_sphere_on_plane
    tex_seed = int(rng.integers(2**31))
    near, far = (0.5, 4.0) if preset == "two-planes" else (1.0, 6.0)
    f = resolution * 1.0  # ~53 degree field of view
    h = w = resolution
    ys, xs = np.mgrid[0:h, 0:w]
    px = np.stack([xs.ravel(), ys.ravel()], axis=-1)

    cameras, images, depths, priors = [], [], [], []
    for pose in _arc_poses(preset, n_views, arc_deg):
        cam = Camera(w, h, f, f, w / 2.0, h / 2.0, pose, near, far)
        origins, dirs = pixel_rays(cam, px)
        depth, color = tracer(origins, dirs, np.random.default_rng(tex_seed))
        if not np.isfinite(depth).all() or depth.max() >= far or depth.min() <= near:
            raise RuntimeError("synthetic geometry escapes the near/far bounds")
        cameras.append(cam)
        images.append(np.round(color.reshape(h, w, 3) * 255.0) / 255.0)
        depths.append(depth.reshape(h, w))

    for d in depths:
        d01 = (d - d.min()) / (d.max() - d.min())
        if distortion is not None:
            d01 = distortion.apply(d01, rng)
        q = np.round(d01 * 65535.0) / 65535.0
        priors.append(DepthPrior(q, np.ones_like(q, dtype=bool), "analytic"))

    return Scene(
        cameras,
        np.stack(images).astype(np.float32),
        priors=priors,
        gt_depth=np.stack(depths).astype(np.float32),
        meta={"preset": preset, "seed": seed},
    )
