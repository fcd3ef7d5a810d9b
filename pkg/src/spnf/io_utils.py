"""Small file helpers: atomic writes, PNG and PFM codecs."""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """``rgb`` is H×W×3 in [0, 1]; quantized to 8 bits."""
    q = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(q, mode="RGB")))


def write_gray16_png(path, values: np.ndarray) -> None:
    """``values`` are raw integer codes in [0, 65535]."""
    q = np.clip(np.round(np.asarray(values, dtype=np.float64)), 0, 65535).astype(np.uint16)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(q)))


def write_mask_png(path, mask: np.ndarray) -> None:
    q = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(q, mode="L")))


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    return img


def read_rgb_png(path) -> np.ndarray:
    img = _open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def read_gray16_png(path) -> np.ndarray:
    """Raw integer codes of a 16-bit (or 8-bit) grayscale PNG as float64."""
    img = _open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel depth image")
    return arr.astype(np.float64)


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(_open(path).convert("L"))
    return arr > 0


def write_pfm(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM rows are stored bottom to top
    atomic_write_bytes(path, header + np.flipud(values).tobytes())


def read_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if not m:
        raise ValueError(f"{path}: malformed PFM header")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=m.end())
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    arr = np.flipud(arr).astype(np.float64)
    return arr if channels == 1 else arr[..., 0]
