"""
Pinhole camera math.

Pixels use continuous (u, v) coordinates with u growing to the right and v
growing downward. Camera-frame points are in meters with +z along the
principal axis. Inputs are assumed undistorted; there is no distortion model.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from depth_forge.errors import BehindCameraError, DomainError


def _check_finite(name: str, *values: float) -> None:
    for value in values:
        if not math.isfinite(value):
            raise DomainError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        _check_finite("intrinsics", self.fx, self.fy, self.cx, self.cy)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def __post_init__(self):
        _check_finite("pixel", self.u, self.v)

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.u < width and 0 <= self.v < height

    def to_index(self) -> Tuple[int, int]:
        """Row/column of the pixel containing this coordinate."""
        return int(math.floor(self.v)), int(math.floor(self.u))

    def to_list(self) -> list:
        return [self.u, self.v]


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        _check_finite("point", self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def distance_to(self, other: "Point3") -> float:
        return math.sqrt(
            (self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2
        )


def _check_depth(depth: float) -> None:
    if not math.isfinite(depth) or depth <= 0:
        raise DomainError(f"depth must be positive and finite, got {depth!r}")


def back_project(p: Pixel, z: float, k: Intrinsics) -> Point3:
    """Camera-frame point at principal-axis depth ``z`` behind pixel ``p``."""
    _check_depth(z)
    return Point3((p.u - k.cx) / k.fx * z, (p.v - k.cy) / k.fy * z, z)


def project(pt: Point3, k: Intrinsics) -> Pixel:
    if pt.z <= 0:
        raise BehindCameraError(f"point is behind the camera (z={pt.z})")
    return Pixel(k.fx * pt.x / pt.z + k.cx, k.fy * pt.y / pt.z + k.cy)


def ray_norm_factor(p: Pixel, k: Intrinsics) -> float:
    """Length of the ray through ``p`` scaled to unit z."""
    a = (p.u - k.cx) / k.fx
    b = (p.v - k.cy) / k.fy
    return math.sqrt(1.0 + a * a + b * b)


def euclid_from_principal(p: Pixel, z: float, k: Intrinsics) -> float:
    """Straight-line camera-to-point distance for principal-axis depth ``z``."""
    _check_depth(z)
    return z * ray_norm_factor(p, k)


def principal_from_euclid(p: Pixel, distance: float, k: Intrinsics) -> float:
    _check_depth(distance)
    return distance / ray_norm_factor(p, k)


def ray_angles(p: Pixel, k: Intrinsics) -> Tuple[float, float]:
    """Signed (horizontal, vertical) ray angles in degrees.

    Horizontal is positive to the right; vertical is positive above the
    principal point, i.e. toward decreasing v.
    """
    horizontal = math.degrees(math.atan((p.u - k.cx) / k.fx))
    vertical = math.degrees(math.atan((k.cy - p.v) / k.fy))
    return horizontal, vertical


def camera_center(pose: np.ndarray) -> np.ndarray:
    """Camera position in world coordinates from a 4x4 world-from-camera pose."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise DomainError(f"pose must be 4x4, got shape {pose.shape}")
    return pose[:3, 3].copy()


def is_rigid(pose: np.ndarray, tol: float = 1e-4) -> bool:
    """True when the rotation block is orthonormal and the last row is [0,0,0,1]."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        return False
    rotation = pose[:3, :3]
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=tol):
        return False
    return bool(np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol))


def back_project_array(us: np.ndarray, vs: np.ndarray, zs: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorised back_project; returns an (N, 3) array."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if np.any(~np.isfinite(zs)) or np.any(zs <= 0):
        raise DomainError("all depths must be positive and finite")
    return np.stack([(us - k.cx) / k.fx * zs, (vs - k.cy) / k.fy * zs, zs], axis=-1)


def ray_norm_factor_array(us: np.ndarray, vs: np.ndarray, k: Intrinsics) -> np.ndarray:
    a = (np.asarray(us, dtype=np.float64) - k.cx) / k.fx
    b = (np.asarray(vs, dtype=np.float64) - k.cy) / k.fy
    return np.sqrt(1.0 + a * a + b * b)
