"""Pinhole cameras and per-pixel ray generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # 4x4, camera looks along -z
    near: float
    far: float

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0 or self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera size and focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")
        if not (self.near > 0 and self.far > self.near):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        rot = self.cam_to_world[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-5:
            raise ValueError("cam_to_world rotation block is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            (self.width, self.height, self.fx, self.fy, self.cx, self.cy, self.near, self.far)
            == (other.width, other.height, other.fx, other.fy, other.cx, other.cy, other.near, other.far)
            and np.array_equal(self.cam_to_world, other.cam_to_world)
        )


def pixel_rays(camera: Camera, px: np.ndarray, jitter: np.ndarray | None = None):
    """World-space origins and unit directions for integer pixels ``px`` (M, 2) as (x, y).

    ``jitter`` (M, 2) in [0, 1) offsets within the pixel; default is the center.
    """
    px = np.asarray(px)
    if px.ndim == 1:
        px = px[None]
    x, y = px[:, 0], px[:, 1]
    if (x < 0).any() or (x >= camera.width).any() or (y < 0).any() or (y >= camera.height).any():
        raise ValueError("pixel coordinate out of bounds")
    if jitter is None:
        jx = jy = 0.5
    else:
        jitter = np.asarray(jitter, dtype=np.float64).reshape(-1, 2)
        jx, jy = jitter[:, 0], jitter[:, 1]
    dirs_cam = np.stack(
        [
            (x + jx - camera.cx) / camera.fx,
            -(y + jy - camera.cy) / camera.fy,
            -np.ones(len(x)),
        ],
        axis=-1,
    )
    dirs = dirs_cam @ camera.cam_to_world[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix placing the camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = true_up
    m[:3, 2] = -forward
    m[:3, 3] = eye
    return m
