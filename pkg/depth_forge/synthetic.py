"""
Synthetic scenes rendered analytically to RGB + principal-axis depth, so the
whole pipeline can run without licensed datasets.

Three scene kinds:

* ``plane``   a single (possibly tilted) checkered plane
* ``room``    floor, ceiling, three walls and a few spheres
* ``scatter`` every pixel gets an independent distance, log-uniform or
              uniform over a range; used for constant-baseline checks
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from depth_forge import settings
from depth_forge.errors import ConfigError
from depth_forge.geometry import Intrinsics, ray_norm_factor_array
from depth_forge.data import IntrinsicsModel, SampleManifestEntry, write_manifest, write_pfm
from depth_forge.augment import ImageDims

logger = logging.getLogger(__name__)

SCENE_KINDS = ("plane", "room", "scatter")

_SURFACE_COLORS = np.array(
    [
        [170, 140, 110],  # floor
        [225, 225, 215],  # ceiling
        [120, 150, 190],  # left wall
        [190, 120, 120],  # right wall
        [130, 180, 130],  # back wall
        [235, 200, 70],   # spheres
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Plane:
    """Points X with ``normal . X = offset`` (camera frame, meters)."""

    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 2.0


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float


def _rays(dims: ImageDims, k: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray directions scaled to unit z, sampled at integer pixel coordinates."""
    us, vs = np.meshgrid(np.arange(dims.width, dtype=np.float64), np.arange(dims.height, dtype=np.float64))
    a = (us - k.cx) / k.fx
    b = (vs - k.cy) / k.fy
    return a, b


def _plane_hits(a: np.ndarray, b: np.ndarray, plane: Plane) -> np.ndarray:
    n = np.asarray(plane.normal, dtype=np.float64)
    denom = n[0] * a + n[1] * b + n[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = plane.offset / denom
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def _sphere_hits(a: np.ndarray, b: np.ndarray, sphere: Sphere) -> np.ndarray:
    c = np.asarray(sphere.center, dtype=np.float64)
    rr = a * a + b * b + 1.0
    rc = a * c[0] + b * c[1] + c[2]
    disc = rc * rc - rr * (c @ c - sphere.radius ** 2)
    with np.errstate(invalid="ignore"):
        root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    near = (rc - root) / rr
    far = (rc + root) / rr
    t = np.where(near > 0, near, far)
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def _shade(base: np.ndarray, a: np.ndarray, b: np.ndarray, z: np.ndarray, cell: float) -> np.ndarray:
    """Checker texture on top of a per-pixel base color."""
    x, y = a * z, b * z
    with np.errstate(invalid="ignore"):
        parity = (np.floor(x / cell) + np.floor(y / cell) + np.floor(z / cell)) % 2
    parity = np.nan_to_num(parity)
    factor = np.where(parity > 0, 0.75, 1.0)[..., None]
    return np.clip(base * factor, 0, 255).astype(np.uint8)


def render_plane_scene(dims: ImageDims, k: Intrinsics, plane: Plane = Plane(),
                       color: Tuple[int, int, int] = (200, 170, 120)) -> Tuple[Image.Image, np.ndarray, np.ndarray]:
    """Image, z-depth map and validity mask of a single plane."""
    a, b = _rays(dims, k)
    z = _plane_hits(a, b, plane)
    mask = np.isfinite(z)
    depth = np.where(mask, z, 0.0)
    base = np.broadcast_to(np.asarray(color, dtype=np.float64), depth.shape + (3,))
    rgb = _shade(base, a, b, np.where(mask, z, 0.0), cell=0.25)
    rgb[~mask] = 0
    return Image.fromarray(rgb, "RGB"), depth, mask


def render_room_scene(dims: ImageDims, k: Intrinsics, rng: np.random.Generator,
                      scale: float = 1.0) -> Tuple[Image.Image, np.ndarray, np.ndarray]:
    """Box room seen from inside plus one to three spheres; closest hit per pixel."""
    half_w = rng.uniform(1.5, 3.0)
    half_h = rng.uniform(1.0, 1.8)
    back = rng.uniform(4.0, 9.0)
    planes = [
        Plane((0.0, 1.0, 0.0), half_h),    # floor (+y is down)
        Plane((0.0, -1.0, 0.0), half_h),   # ceiling
        Plane((-1.0, 0.0, 0.0), half_w),   # left wall
        Plane((1.0, 0.0, 0.0), half_w),    # right wall
        Plane((0.0, 0.0, 1.0), back),      # back wall
    ]
    spheres = []
    for _ in range(int(rng.integers(1, 4))):
        radius = rng.uniform(0.25, 0.7)
        center = (
            rng.uniform(-half_w + radius, half_w - radius),
            rng.uniform(-half_h + radius, half_h - radius),
            rng.uniform(1.5 + radius, back - radius),
        )
        spheres.append(Sphere(center, radius))

    a, b = _rays(dims, k)
    hits = [_plane_hits(a, b, p) for p in planes] + [_sphere_hits(a, b, s) for s in spheres]
    stack = np.stack(hits, axis=0)
    nearest = np.argmin(stack, axis=0)
    z = np.take_along_axis(stack, nearest[None], axis=0)[0]
    mask = np.isfinite(z)
    surface = np.minimum(nearest, len(_SURFACE_COLORS) - 1)
    rgb = _shade(_SURFACE_COLORS[surface], a, b, np.where(mask, z, 0.0), cell=0.5)
    depth = np.where(mask, z * scale, 0.0)
    return Image.fromarray(rgb, "RGB"), depth, mask


def render_scatter_scene(dims: ImageDims, k: Intrinsics, rng: np.random.Generator,
                         distance_range: Tuple[float, float], log_uniform: bool = True
                         ) -> Tuple[Image.Image, np.ndarray, np.ndarray]:
    """Independent per-pixel euclidean distances in ``distance_range``."""
    lo, hi = distance_range
    shape = (dims.height, dims.width)
    if log_uniform:
        distance = np.exp(rng.uniform(np.log(lo), np.log(hi), size=shape))
    else:
        distance = rng.uniform(lo, hi, size=shape)
    us, vs = np.meshgrid(np.arange(dims.width, dtype=np.float64), np.arange(dims.height, dtype=np.float64))
    depth = distance / ray_norm_factor_array(us, vs, k)
    gray = np.clip(255.0 * (np.log(distance) - np.log(lo)) / max(np.log(hi / lo), 1e-9), 0, 255)
    rgb = np.repeat(gray[..., None], 3, axis=2).astype(np.uint8)
    return Image.fromarray(rgb, "RGB"), depth, np.ones(shape, dtype=bool)


def _random_intrinsics(dims: ImageDims, rng: np.random.Generator) -> Intrinsics:
    # Horizontal field of view between ~50 and ~100 degrees.
    fx = dims.width / (2.0 * np.tan(np.radians(rng.uniform(25.0, 50.0))))
    fy = fx * rng.uniform(0.95, 1.05)
    cx = dims.width / 2.0 + rng.uniform(-0.05, 0.05) * dims.width
    cy = dims.height / 2.0 + rng.uniform(-0.05, 0.05) * dims.height
    return Intrinsics(round(fx, 3), round(fy, 3), round(cx, 3), round(cy, 3))


def _rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _pose(center: np.ndarray, yaw: float) -> List[List[float]]:
    pose = np.eye(4)
    pose[:3, :3] = _rotation_y(yaw)
    pose[:3, 3] = center
    return pose.tolist()


def _write_depth(path: Path, depth: np.ndarray, mask: np.ndarray, encoding: str, depth_scale: float) -> None:
    if encoding == "png16":
        raw = np.where(mask, np.round(depth / depth_scale), 0)
        if raw.max(initial=0) > np.iinfo(np.uint16).max:
            raise ConfigError(f"depth {depth.max():.2f} m does not fit png16 at depth_scale {depth_scale}")
        Image.fromarray(raw.astype(np.uint16)).save(path)
    elif encoding == "npy":
        np.save(path, np.where(mask, depth / depth_scale, 0.0).astype(np.float32))
    elif encoding == "pfm":
        write_pfm(path, np.where(mask, depth / depth_scale, 0.0))
    else:
        raise ConfigError(f"unknown depth encoding {encoding!r}")


def _png16_scale(hi: float) -> float:
    return settings.DEFAULT_DEPTH_SCALE if hi <= 65.0 else 0.01


def write_synthetic_manifest(out_dir, n: int, datasets: Sequence[str] = ("synthetic",),
                             depth_range: Tuple[float, float] = (0.5, 80.0),
                             rng: Optional[np.random.Generator] = None, with_poses: bool = False,
                             scene: str = "room", dims: Tuple[int, int] = (160, 120),
                             encoding: str = "png16", split: str = "eval", log_uniform: bool = True,
                             frames_per_scene: int = 4) -> Path:
    """Render ``n`` samples into ``out_dir`` and write ``manifest.jsonl`` beside them.

    Room scenes are uniformly rescaled so their nearest surface lands inside
    ``depth_range``; pixels farther than the range's upper end are masked.
    With ``with_poses`` consecutive frames share a scene and a camera path.
    """
    if scene not in SCENE_KINDS:
        raise ConfigError(f"unknown synthetic scene {scene!r}, expected one of {SCENE_KINDS}")
    if n < 1:
        raise ConfigError("synthetic manifest needs n >= 1")
    lo, hi = depth_range
    if not 0 < lo < hi:
        raise ConfigError(f"invalid depth range {depth_range}")
    rng = rng or np.random.default_rng(0)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    depth_scale = _png16_scale(hi) if encoding == "png16" else 1.0
    image_dims = ImageDims(*dims)
    suffix = {"png16": "png", "npy": "npy", "pfm": "pfm"}[encoding]

    entries = []
    for i in range(n):
        dataset = datasets[i % len(datasets)]
        k = _random_intrinsics(image_dims, rng)
        if scene == "scatter":
            image, depth, mask = render_scatter_scene(image_dims, k, rng, depth_range, log_uniform)
        elif scene == "plane":
            tilt = rng.uniform(-0.4, 0.4)
            offset = float(np.exp(rng.uniform(np.log(lo), np.log(hi / 2.0))))
            image, depth, mask = render_plane_scene(
                image_dims, k, Plane((0.0, float(np.sin(tilt)), float(np.cos(tilt))), offset)
            )
        else:
            image, depth, mask = render_room_scene(image_dims, k, rng)
            nearest = float(depth[mask].min())
            target = float(np.exp(rng.uniform(np.log(lo), np.log(max(lo, hi / 8.0)))))
            depth = depth * (target / nearest)
        euclid = depth * ray_norm_factor_array(*np.meshgrid(
            np.arange(image_dims.width, dtype=np.float64), np.arange(image_dims.height, dtype=np.float64)), k)
        mask = mask & (euclid >= lo) & (euclid <= hi)
        depth = np.where(mask, depth, 0.0)

        sample_id = f"{dataset}-{i:05d}"
        image_rel = f"images/{sample_id}.png"
        depth_rel = f"depth/{sample_id}.{suffix}"
        image.save(out_dir / image_rel)
        _write_depth(out_dir / depth_rel, depth, mask, encoding, depth_scale)

        pose = scene_id = None
        if with_poses:
            scene_id = f"{dataset}-scene{i // frames_per_scene:04d}"
            step = i % frames_per_scene
            center = np.array([0.8 * step, 0.0, 1.2 * step]) + (i // frames_per_scene) * 100.0
            pose = _pose(center, yaw=0.1 * step)
        entries.append(
            SampleManifestEntry(
                id=sample_id,
                image_path=image_rel,
                depth_path=depth_rel,
                depth_encoding=encoding,
                depth_scale=depth_scale,
                intrinsics=IntrinsicsModel(**k.to_dict()),
                pose=pose,
                dataset=dataset,
                split=split,
                scene=scene_id,
                provenance={"generator": "synthetic", "scene": scene},
            )
        )
    path = write_manifest(entries, out_dir / "manifest.jsonl")
    logger.info(f"Wrote {n} synthetic {scene} samples to {path}")
    return path
