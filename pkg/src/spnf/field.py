"""Radiance field MLP with positional encoding and hand-written reverse mode.

Points are grouped by ray: positions have shape (R, N, 3) and directions
(R, 3), so the direction encoding and its projection into the color branch
are computed once per ray rather than once per sample.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.special import expit

CHECKPOINT_MAGIC = b"SPNF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncodingConfig:
    levels_pos: int = 10
    levels_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.levels_pos < 0 or self.levels_dir < 0:
            raise ValueError("encoding levels must be >= 0")

    def dim(self, in_dim: int, levels: int) -> int:
        return in_dim * (int(self.include_input) + 2 * levels)


@dataclass(frozen=True)
class FieldArch:
    width: int = 64
    depth: int = 4
    skip: int = 2  # 0-based index of the layer that re-reads the encoded position
    color_width: int = 32


@dataclass
class FieldParams:
    arch: FieldArch
    encoding: EncodingConfig
    tensors: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, self.encoding, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.arch, self.encoding, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class FieldOutput:
    sigma: np.ndarray  # (R, N)
    color: np.ndarray  # (R, N, 3)


def positional_encode(v: np.ndarray, levels: int, include_input: bool = True) -> np.ndarray:
    """Encode the last axis of ``v`` as ``[v, sin(2^j v), cos(2^j v)]``.

    Output ordering: optional identity block, then for each level j a sin
    block followed by a cos block, each of width ``v.shape[-1]``.
    """
    v = np.asarray(v)
    dtype = v.dtype if v.dtype.kind == "f" else np.float64
    n = v.shape[-1]
    out = np.empty(v.shape[:-1] + (int(include_input) + 2 * levels, n), dtype=dtype)
    if include_input:
        out[..., 0, :] = v
    if levels:
        # double-angle recurrence in float64: error grows like 2^j * 1e-16
        v64 = v.astype(np.float64)
        s, c = np.sin(v64), np.cos(v64)
        base = int(include_input)
        for j in range(levels):
            out[..., base + 2 * j, :] = s
            out[..., base + 2 * j + 1, :] = c
            if j + 1 < levels:
                s, c = 2.0 * s * c, (c - s) * (c + s)
    return out.reshape(v.shape[:-1] + (-1,))


def _layer_shapes(arch: FieldArch, enc: EncodingConfig) -> list[tuple[str, tuple[int, ...]]]:
    dx = enc.dim(3, enc.levels_pos)
    dd = enc.dim(3, enc.levels_dir)
    shapes = []
    in_dim = dx
    for i in range(arch.depth):
        if i == arch.skip and i > 0:
            in_dim += dx
        shapes.append((f"pts{i}.w", (in_dim, arch.width)))
        shapes.append((f"pts{i}.b", (arch.width,)))
        in_dim = arch.width
    shapes += [
        ("sigma.w", (arch.width, 1)),
        ("sigma.b", (1,)),
        ("color_hidden.w", (arch.width + dd, arch.color_width)),
        ("color_hidden.b", (arch.color_width,)),
        ("rgb.w", (arch.color_width, 3)),
        ("rgb.b", (3,)),
    ]
    return shapes


def init_field(
    seed: int,
    arch: FieldArch | None = None,
    encoding: EncodingConfig | None = None,
    dtype=np.float32,
) -> FieldParams:
    """Uniform He-style fan-in initialization, biases zero."""
    arch = arch or FieldArch()
    encoding = encoding or EncodingConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(arch, encoding):
        if name.endswith(".w"):
            bound = np.sqrt(6.0 / shape[0])
            if name in ("sigma.w", "rgb.w"):
                bound = np.sqrt(1.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return FieldParams(arch, encoding, tensors)


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


class _Cache:
    __slots__ = ("shape", "gx", "gd", "hidden", "h_last", "sigma_raw", "hc", "rgb")


def field_forward(params: FieldParams, x: np.ndarray, d: np.ndarray, keep_cache: bool = False):
    """Evaluate density and color at positions ``x`` (R, N, 3) seen along ``d`` (R, 3).

    Returns a FieldOutput, plus an opaque cache for :func:`field_backward`
    when ``keep_cache`` is set.
    """
    p = params.tensors
    dtype = params.dtype
    arch, enc = params.arch, params.encoding
    x = np.asarray(x, dtype=dtype)
    d = np.asarray(d, dtype=dtype)
    if x.ndim != 3 or x.shape[-1] != 3 or d.shape != (x.shape[0], 3):
        raise ValueError(f"expected x (R, N, 3) and d (R, 3), got {x.shape} and {d.shape}")
    if not (np.isfinite(x).all() and np.isfinite(d).all()):
        raise ValueError("non-finite field input")
    R, N, _ = x.shape

    gx = positional_encode(x.reshape(R * N, 3), enc.levels_pos, enc.include_input)
    h = gx
    hidden = []  # post-activation outputs, one per layer
    for i in range(arch.depth):
        w = p[f"pts{i}.w"]
        if i == arch.skip and i > 0:
            z = h @ w[: arch.width]
            z += gx @ w[arch.width :]
        else:
            z = h @ w
        z += p[f"pts{i}.b"]
        np.maximum(z, 0, out=z)
        h = z
        hidden.append(h)

    sigma_raw = (h @ p["sigma.w"])[:, 0] + p["sigma.b"][0]
    sigma = _softplus(sigma_raw)

    gd = positional_encode(d, enc.levels_dir, enc.include_input)
    wc = p["color_hidden.w"]
    per_ray = gd @ wc[arch.width:] + p["color_hidden.b"]  # (R, C)
    hc = (h @ wc[: arch.width]).reshape(R, N, -1)
    hc += per_ray[:, None, :]
    np.maximum(hc, 0, out=hc)
    hc = hc.reshape(R * N, -1)
    rgb = expit(hc @ p["rgb.w"] + p["rgb.b"])

    out = FieldOutput(sigma.reshape(R, N), rgb.reshape(R, N, 3))
    if not keep_cache:
        return out
    cache = _Cache()
    cache.shape = (R, N)
    cache.gx, cache.gd, cache.hidden = gx, gd, hidden
    cache.sigma_raw, cache.hc, cache.rgb = sigma_raw, hc, rgb
    return out, cache


def field_backward(params: FieldParams, cache, g_sigma: np.ndarray, g_color: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(g_sigma * sigma) + sum(g_color * color)`` w.r.t. every parameter."""
    p = params.tensors
    arch = params.arch
    R, N = cache.shape
    g_sigma = np.asarray(g_sigma, dtype=params.dtype)
    g_color = np.asarray(g_color, dtype=params.dtype)
    if g_sigma.shape != (R, N) or g_color.shape != (R, N, 3):
        raise ValueError(
            f"cotangent shapes {g_sigma.shape}, {g_color.shape} do not match batch ({R}, {N})"
        )
    grads: dict[str, np.ndarray] = {}

    rgb = cache.rgb
    g_zrgb = g_color.reshape(R * N, 3) * rgb * (1 - rgb)
    grads["rgb.w"] = cache.hc.T @ g_zrgb
    grads["rgb.b"] = g_zrgb.sum(0)

    g_zc = g_zrgb @ p["rgb.w"].T
    np.multiply(g_zc, cache.hc > 0, out=g_zc)
    h_last = cache.hidden[-1]
    g_zc_ray = g_zc.reshape(R, N, -1).sum(1)
    grads["color_hidden.w"] = np.concatenate([h_last.T @ g_zc, cache.gd.T @ g_zc_ray], axis=0)
    grads["color_hidden.b"] = g_zc_ray.sum(0)
    g_h = g_zc @ p["color_hidden.w"][: arch.width].T

    g_sraw = g_sigma.reshape(R * N) * expit(cache.sigma_raw)
    grads["sigma.w"] = (h_last.T @ g_sraw)[:, None]
    grads["sigma.b"] = np.array([g_sraw.sum()], dtype=params.dtype)
    g_h += g_sraw[:, None] * p["sigma.w"][:, 0]

    for i in reversed(range(arch.depth)):
        g_z = np.multiply(g_h, cache.hidden[i] > 0, out=g_h)
        if i == 0:
            grads["pts0.w"] = cache.gx.T @ g_z
        elif i == arch.skip:
            grads[f"pts{i}.w"] = np.concatenate([cache.hidden[i - 1].T @ g_z, cache.gx.T @ g_z], axis=0)
        else:
            grads[f"pts{i}.w"] = cache.hidden[i - 1].T @ g_z
        grads[f"pts{i}.b"] = g_z.sum(0)
        if i > 0:
            g_h = g_z @ p[f"pts{i}.w"][: arch.width].T

    return {k: grads[k] for k in p}


def save_checkpoint(path, params: FieldParams, iteration: int = 0, extra: dict | None = None) -> None:
    """Write ``SPNF`` | u32 version | u32 header length | JSON header | float32 LE params."""
    header = {
        "arch": asdict(params.arch),
        "encoding": asdict(params.encoding),
        "iteration": int(iteration),
        "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for v in params.tensors.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[FieldParams, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SPNF checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    arch = FieldArch(**header["arch"])
    enc = EncodingConfig(**header["encoding"])
    offset = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    expected = [n for n, _ in _layer_shapes(arch, enc)]
    if list(tensors) != expected:
        raise ValueError(f"{path}: tensor layout does not match architecture")
    return FieldParams(arch, enc, tensors), header
