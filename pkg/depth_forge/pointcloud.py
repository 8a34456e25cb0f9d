"""
Metric point clouds from per-pixel distance answers.

Answers are euclidean camera-to-point distances; each is converted to
principal-axis depth before back-projection.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from depth_forge import settings
from depth_forge.augment import ImageDims
from depth_forge.errors import ConfigError, InvariantError
from depth_forge.geometry import Intrinsics, Pixel, back_project_array, ray_norm_factor_array
from depth_forge.utils import PathLike, dumps_record, iter_jsonl

logger = logging.getLogger(__name__)

VERTEX_DTYPE = [
    ("x", "<f4"),
    ("y", "<f4"),
    ("z", "<f4"),
    ("red", "u1"),
    ("green", "u1"),
    ("blue", "u1"),
]

# Blue -> cyan -> green -> yellow -> red, near to far.
_COLORMAP_STOPS = np.array(
    [[48, 18, 59], [40, 188, 235], [120, 255, 90], [250, 185, 45], [122, 4, 3]],
    dtype=np.float64,
)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None
    failures: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise InvariantError(f"{len(self.colors)} colors for {len(self.points)} points")
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
            if len(self.pixels) != len(self.points):
                raise InvariantError(f"{len(self.pixels)} source pixels for {len(self.points)} points")
        if len(self.points) and not np.all(self.points[:, 2] > 0):
            raise InvariantError("every point must lie in front of the camera (z > 0)")

    def __len__(self) -> int:
        return len(self.points)

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def grid_pixels(dims: ImageDims, n: int = settings.POINTCLOUD_GRID_PIXELS) -> List[Pixel]:
    """About ``n`` pixels at the cell centers of a uniform lattice, row-major."""
    if n < 1:
        raise ConfigError(f"grid size must be >= 1, got {n}")
    if n > dims.width * dims.height:
        raise ConfigError(f"grid of {n} pixels exceeds the {dims.width}x{dims.height} image")
    rows = min(max(1, _round_half_up(math.sqrt(n * dims.height / dims.width))), dims.height)
    cols = min(max(1, _round_half_up(n / rows)), dims.width)
    cell_w = dims.width / cols
    cell_h = dims.height / rows
    return [Pixel((c + 0.5) * cell_w, (r + 0.5) * cell_h) for r in range(rows) for c in range(cols)]


def assemble(image: Image.Image, k: Intrinsics, pixels: Sequence[Pixel],
             answers: Sequence[Optional[float]]) -> PointCloud:
    """Back-project each answered pixel; missing or non-positive answers are skipped and counted."""
    if len(pixels) != len(answers):
        raise InvariantError(f"{len(answers)} answers for {len(pixels)} pixels")
    keep = [
        i for i, a in enumerate(answers)
        if a is not None and math.isfinite(a) and a > 0
    ]
    failures = len(pixels) - len(keep)
    if not keep:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros((0, 2)), failures)

    us = np.array([pixels[i].u for i in keep], dtype=np.float64)
    vs = np.array([pixels[i].v for i in keep], dtype=np.float64)
    euclid = np.array([answers[i] for i in keep], dtype=np.float64)
    zs = euclid / ray_norm_factor_array(us, vs, k)
    points = back_project_array(us, vs, zs, k)

    rgb = np.asarray(image.convert("RGB"))
    rows = np.clip(np.floor(vs).astype(int), 0, rgb.shape[0] - 1)
    cols = np.clip(np.floor(us).astype(int), 0, rgb.shape[1] - 1)
    colors = rgb[rows, cols]
    if failures:
        logger.warning(f"Point cloud: skipped {failures} of {len(pixels)} pixels without a usable answer")
    return PointCloud(points, colors, np.stack([us, vs], axis=1), failures)


def depth_colors(cloud: PointCloud) -> np.ndarray:
    """Colormap over each point's distance, nearest to farthest."""
    if not len(cloud):
        return np.zeros((0, 3), dtype=np.uint8)
    d = cloud.distances()
    span = d.max() - d.min()
    t = (d - d.min()) / span if span > 0 else np.zeros_like(d)
    xp = np.linspace(0.0, 1.0, len(_COLORMAP_STOPS))
    channels = [np.interp(t, xp, _COLORMAP_STOPS[:, c]) for c in range(3)]
    return np.clip(np.round(np.stack(channels, axis=1)), 0, 255).astype(np.uint8)


def write_ply(cloud: PointCloud, path: PathLike) -> Path:
    """Binary little-endian PLY with float32 xyz and uchar rgb per vertex."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vertex = np.empty(len(cloud), dtype=VERTEX_DTYPE)
    vertex["x"], vertex["y"], vertex["z"] = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
    colors = cloud.colors if cloud.colors is not None else np.full((len(cloud), 3), 255, dtype=np.uint8)
    vertex["red"], vertex["green"], vertex["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))
    logger.info(f"Wrote {len(cloud)} points to {path}")
    return path


def read_ply(path: PathLike) -> PointCloud:
    try:
        ply = PlyData.read(str(path))
        vertex = ply["vertex"]
        points = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    except (PlyParseError, KeyError, ValueError, IndexError, EOFError) as e:
        raise ConfigError(f"malformed PLY file {path}: {e}") from e
    names = {p.name for p in vertex.properties}
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1)
    return PointCloud(points, colors)


def plane_fit_rms(points: np.ndarray) -> float:
    """RMS distance of ``points`` to their least-squares plane."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 3:
        return 0.0
    centered = points - points.mean(axis=0)
    normal = np.linalg.svd(centered, full_matrices=False)[2][-1]
    return float(np.sqrt(np.mean((centered @ normal) ** 2)))


def summarize(cloud: PointCloud) -> Dict[str, float]:
    distances = cloud.distances()
    return {
        "points": len(cloud),
        "failures": cloud.failures,
        "median_distance_m": float(np.median(distances)) if len(cloud) else float("nan"),
        "median_depth_m": float(np.median(cloud.points[:, 2])) if len(cloud) else float("nan"),
    }


class QueryLog:
    """Append-only JSONL of answered grid pixels, keyed by pixel index.

    A rerun skips every index already present, so an interrupted point-cloud
    job resumes where it stopped.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.entries: Dict[int, dict] = {}
        if self.path.is_file():
            for _, entry in iter_jsonl(self.path):
                self.entries[int(entry["index"])] = entry
            logger.info(f"Resuming from {self.path}: {len(self.entries)} pixels already answered")

    def __contains__(self, index: int) -> bool:
        return index in self.entries

    def value(self, index: int) -> Optional[float]:
        entry = self.entries.get(index)
        return None if entry is None else entry.get("value")

    def append(self, index: int, pixel: Pixel, text: str, value: Optional[float], status: str) -> None:
        entry = {"index": index, "u": pixel.u, "v": pixel.v, "value": value, "status": status, "text": text}
        self.entries[index] = entry
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(dumps_record(entry) + "\n")
