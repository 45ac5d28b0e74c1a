"""Pinhole camera math and 3D box construction.

Camera frame: x right, y down, z forward. Yaw rotates about the y axis; at
yaw 0 a box's length runs along +x.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, as_tensor, atan2, concat, cos, sin, stack

# Object-frame corner template, columns (length, height, width) signs.
# Corner i uses bit 2 for length, bit 1 for height, bit 0 for width:
# i = 0 -> (+l, +h, +w), i = 1 -> (+l, +h, -w), ..., i = 7 -> (-l, -h, -w).
CORNER_SIGNS = np.array([[1 - 2 * ((i >> 2) & 1), 1 - 2 * ((i >> 1) & 1), 1 - 2 * (i & 1)]
                         for i in range(8)], dtype=np.float64)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    u0: float
    v0: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]])

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "u0": self.u0, "v0": self.v0})

    @classmethod
    def from_json(cls, text: str) -> "CameraIntrinsics":
        d = json.loads(text)
        return cls(float(d["fx"]), float(d["fy"]), float(d["u0"]), float(d["v0"]))


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (h, w, l)
    yaw: float
    attribute: int | None = None

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise GeometryError(f"box dimensions must be positive, got {self.dims}")
        if self.center[2] <= 0:
            raise GeometryError(f"box center must lie in front of the camera, z={self.center[2]}")


def project(K: CameraIntrinsics, p) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if z <= 0:
        raise GeometryError(f"cannot project a point with z={z}")
    return K.fx * x / z + K.u0, K.fy * y / z + K.v0


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, float)
    if np.any(pts[:, 2] <= 0):
        raise GeometryError("cannot project points with z <= 0")
    return np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.u0,
                     K.fy * pts[:, 1] / pts[:, 2] + K.v0], axis=1)


def backproject(K: CameraIntrinsics, uv, z: float) -> tuple[float, float, float]:
    if z <= 0:
        raise GeometryError(f"cannot backproject to depth z={z}")
    u, v = uv
    return (u - K.u0) * z / K.fx, (v - K.v0) * z / K.fy, float(z)


def backproject_t(K: CameraIntrinsics, u: Tensor, v: Tensor, z: Tensor) -> Tensor:
    """Differentiable backprojection; returns a length-3 tensor."""
    x = (u - K.u0) * z * (1.0 / K.fx)
    y = (v - K.v0) * z * (1.0 / K.fy)
    return concat([x.reshape(1), y.reshape(1), z.reshape(1)])


def update_intrinsics(K: CameraIntrinsics, s: float, x0: float, y0: float) -> CameraIntrinsics:
    """Intrinsics after resizing by ``s`` and cropping at (x0, y0)."""
    if s <= 0:
        raise GeometryError(f"scale must be positive, got {s}")
    return CameraIntrinsics(K.fx * s, K.fy * s, K.u0 * s - x0, K.v0 * s - y0)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def box_corners(b: Box3D) -> np.ndarray:
    """8 x 3 corners in camera coordinates, ordered as ``CORNER_SIGNS``."""
    h, w, l = b.dims
    local = CORNER_SIGNS * np.array([l / 2, h / 2, w / 2])
    return local @ yaw_rotation(b.yaw).T + np.asarray(b.center, float)


def box_corners_t(center, dims, yaw) -> Tensor:
    """Differentiable ``box_corners``: center (3,), dims (h, w, l), scalar yaw."""
    center, dims, yaw = as_tensor(center), as_tensor(dims), as_tensor(yaw).reshape(())
    half = stack([dims[2], dims[0], dims[1]]) * 0.5
    local = Tensor(CORNER_SIGNS) * half.reshape(1, 3)
    c, s = cos(yaw), sin(yaw)
    lx, ly, lz = local[:, 0], local[:, 1], local[:, 2]
    x = lx * c + lz * s
    z = lz * c - lx * s
    return stack([x, ly, z], axis=1) + center.reshape(1, 3)


def alpha_to_yaw(alpha, center):
    """Observation angle to yaw: ``alpha + atan2(x, z)``."""
    x, z = center[0], center[2]
    if isinstance(alpha, Tensor) or isinstance(x, Tensor) or isinstance(z, Tensor):
        return as_tensor(alpha) + atan2(as_tensor(x), as_tensor(z))
    if z <= 0:
        raise GeometryError(f"alpha_to_yaw needs z > 0, got {z}")
    return float(alpha) + float(np.arctan2(x, z))


def yaw_to_alpha(yaw: float, center) -> float:
    x, z = center[0], center[2]
    return float(yaw) - float(np.arctan2(x, z))


def relative_crop_params(rng: np.random.Generator, image_size: tuple[int, int],
                         low: float = 0.5, high: float = 1.0) -> tuple[float, int, int, tuple[int, int]]:
    """Draw a relative crop and express it as (scale, x0, y0, crop size).

    The crop covers ``ratio`` of each image side, placed uniformly; resizing
    it back to ``image_size`` gives scale ``1 / ratio``.
    """
    H, W = image_size
    ratio = float(rng.uniform(low, high))
    ch = max(1, int(round(ratio * H)))
    cw = max(1, int(round(ratio * W)))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    s = 1.0 / ratio
    return s, left * s, top * s, (ch, cw)
