"""
Intrinsic-conditioned augmentation.

Images are first resized so both focal lengths equal ``f_uni``; training
images are then randomly cropped while every query pixel is kept inside the
crop. Ground-truth depths are never resampled: query pixels carry their
original coordinates and depth is read from the original depth map.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, field_validator, model_validator

from depth_forge import settings
from depth_forge.errors import DegenerateInputError, InfeasibleCropError, OutOfBoundsError
from depth_forge.geometry import Intrinsics, Pixel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DegenerateInputError(f"image dimensions must be >= 1, got {self.width}x{self.height}")

    @classmethod
    def of(cls, image: Image.Image) -> "ImageDims":
        return cls(image.width, image.height)


class AugmentConfig(BaseModel):
    f_uni: float = settings.F_UNI
    # Off: frames keep their native focal lengths.
    unify_focal: bool = True
    crop_width_range: Tuple[int, int] = settings.CROP_WIDTH_RANGE
    crop_height_range: Tuple[int, int] = settings.CROP_HEIGHT_RANGE
    # Only applied to train-split samples; evaluation never crops.
    crop_enabled: bool = True
    max_dimension: Optional[int] = settings.MAX_DIMENSION

    @field_validator("f_uni")
    @classmethod
    def _positive_focal(cls, v: float) -> float:
        if not v > 0 or not math.isfinite(v):
            raise ValueError("f_uni must be positive")
        return v

    @field_validator("crop_width_range", "crop_height_range")
    @classmethod
    def _valid_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = v
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid crop range {v}")
        return v

    @model_validator(mode="after")
    def _positive_guard(self) -> "AugmentConfig":
        if self.max_dimension is not None and self.max_dimension < 1:
            raise ValueError("max_dimension must be positive or null")
        return self


@dataclass(frozen=True)
class PixelTransform:
    """Resize followed by crop: ``u' = u * scale_x - offset_x``."""

    scale_x: float = 1.0
    scale_y: float = 1.0
    offset_x: float = 0.0
    offset_y: float = 0.0

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise DegenerateInputError("transform scales must be positive")
        if self.offset_x < 0 or self.offset_y < 0:
            raise DegenerateInputError("crop offsets must be non-negative")

    def with_crop(self, offset_x: float, offset_y: float) -> "PixelTransform":
        return PixelTransform(self.scale_x, self.scale_y, self.offset_x + offset_x, self.offset_y + offset_y)

    def to_dict(self) -> dict:
        return {
            "scale_x": self.scale_x,
            "scale_y": self.scale_y,
            "offset_x": self.offset_x,
            "offset_y": self.offset_y,
        }


@dataclass(frozen=True)
class CropRect:
    x: int
    y: int
    width: int
    height: int

    def box(self) -> Tuple[int, int, int, int]:
        return self.x, self.y, self.x + self.width, self.y + self.height


@dataclass
class AugmentResult:
    image: Image.Image
    intrinsics: Intrinsics
    pixels: List[Pixel]
    transform: PixelTransform
    crop: Optional[CropRect] = None
    original_pixels: List[Pixel] = field(default_factory=list)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def unify_focal(dims: ImageDims, k: Intrinsics, f_uni: float) -> Tuple[ImageDims, Intrinsics, PixelTransform]:
    """Resize geometry that brings both focal lengths to ``f_uni``.

    The content is scaled by exactly ``f_uni / f`` per axis and the canvas is
    rounded half-up to whole pixels, so the new intrinsics are exactly
    ``fx = fy = f_uni`` and pixel transforms stay exact.
    """
    if not f_uni > 0:
        raise DegenerateInputError(f"f_uni must be positive, got {f_uni}")
    scale_x = f_uni / k.fx
    scale_y = f_uni / k.fy
    new_dims_w = _round_half_up(scale_x * dims.width)
    new_dims_h = _round_half_up(scale_y * dims.height)
    if new_dims_w < 1 or new_dims_h < 1:
        raise DegenerateInputError(
            f"focal unification of {dims.width}x{dims.height} (fx={k.fx}, fy={k.fy}) "
            f"produces an empty image"
        )
    new_k = Intrinsics(f_uni, f_uni, k.cx * scale_x, k.cy * scale_y)
    return ImageDims(new_dims_w, new_dims_h), new_k, PixelTransform(scale_x, scale_y)


def transform_pixel(p: Pixel, t: PixelTransform) -> Pixel:
    return Pixel(p.u * t.scale_x - t.offset_x, p.v * t.scale_y - t.offset_y)


def inverse_transform_pixel(p: Pixel, t: PixelTransform) -> Pixel:
    return Pixel((p.u + t.offset_x) / t.scale_x, (p.v + t.offset_y) / t.scale_y)


def _origin_bounds(extent: int, size: int, lo_px: Optional[int], hi_px: Optional[int]) -> Tuple[int, int]:
    """Inclusive range of crop origins along one axis."""
    lo, hi = 0, extent - size
    if lo_px is not None:
        lo = max(lo, hi_px - size + 1)
        hi = min(hi, lo_px)
    return lo, hi


def sample_crop(
    rng: np.random.Generator,
    dims: ImageDims,
    cfg: AugmentConfig,
    must_contain: Sequence[Pixel] = (),
) -> CropRect:
    """Random crop rectangle inside ``dims`` that contains every pixel of ``must_contain``."""
    for p in must_contain:
        if not p.inside(dims.width, dims.height):
            raise InfeasibleCropError(f"pixel ({p.u}, {p.v}) lies outside the {dims.width}x{dims.height} image")

    width = int(rng.integers(cfg.crop_width_range[0], cfg.crop_width_range[1] + 1))
    height = int(rng.integers(cfg.crop_height_range[0], cfg.crop_height_range[1] + 1))
    width = min(width, dims.width)
    height = min(height, dims.height)

    if must_contain:
        cols = [int(math.floor(p.u)) for p in must_contain]
        rows = [int(math.floor(p.v)) for p in must_contain]
        min_u, max_u, min_v, max_v = min(cols), max(cols), min(rows), max(rows)
        # Enlarge to the smallest size that can still hold every pixel.
        width = min(max(width, max_u - min_u + 1), dims.width)
        height = min(max(height, max_v - min_v + 1), dims.height)
    else:
        min_u = max_u = min_v = max_v = None

    x_lo, x_hi = _origin_bounds(dims.width, width, min_u, max_u)
    y_lo, y_hi = _origin_bounds(dims.height, height, min_v, max_v)
    if x_lo > x_hi or y_lo > y_hi:
        raise InfeasibleCropError("no crop origin contains all query pixels")

    x = int(rng.integers(x_lo, x_hi + 1))
    y = int(rng.integers(y_lo, y_hi + 1))
    return CropRect(x, y, width, height)


def resize_image(image: Image.Image, dims: ImageDims, t: PixelTransform) -> Image.Image:
    """Bilinear resample of ``image`` by the exact scales of ``t`` onto a ``dims`` canvas."""
    if (dims.width, dims.height) == image.size and t.scale_x == 1.0 and t.scale_y == 1.0:
        return image.copy()
    return image.transform(
        (dims.width, dims.height),
        Image.Transform.AFFINE,
        (1.0 / t.scale_x, 0.0, 0.0, 0.0, 1.0 / t.scale_y, 0.0),
        resample=Image.Resampling.BILINEAR,
    )


def apply_augment(
    image: Image.Image,
    k: Intrinsics,
    query_pixels: Sequence[Pixel],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    crop: bool = True,
) -> AugmentResult:
    """Unify the focal length of ``image`` then (optionally) random-crop it.

    ``crop`` is ANDed with ``cfg.crop_enabled``; callers pass False for
    evaluation samples.
    """
    dims = ImageDims.of(image)
    for p in query_pixels:
        if not p.inside(dims.width, dims.height):
            raise OutOfBoundsError(f"query pixel ({p.u}, {p.v}) outside {dims.width}x{dims.height} image")

    if cfg.unify_focal:
        new_dims, new_k, transform = unify_focal(dims, k, cfg.f_uni)
    else:
        new_dims, new_k, transform = dims, k, PixelTransform()

    if cfg.max_dimension is not None and max(new_dims.width, new_dims.height) > cfg.max_dimension:
        raise DegenerateInputError(
            f"resized image {new_dims.width}x{new_dims.height} exceeds max_dimension={cfg.max_dimension}"
        )

    resized = resize_image(image, new_dims, transform)
    pixels = [transform_pixel(p, transform) for p in query_pixels]
    for p in pixels:
        # Canvas rounding can cut off up to half a pixel on the far edges.
        if not p.inside(new_dims.width, new_dims.height):
            raise OutOfBoundsError(
                f"query pixel maps to ({p.u:.3f}, {p.v:.3f}), outside the "
                f"{new_dims.width}x{new_dims.height} resized image"
            )

    crop_rect = None
    if crop and cfg.crop_enabled:
        crop_rect = sample_crop(rng, new_dims, cfg, pixels)
        resized = resized.crop(crop_rect.box())
        transform = transform.with_crop(crop_rect.x, crop_rect.y)
        new_k = Intrinsics(new_k.fx, new_k.fy, new_k.cx - crop_rect.x, new_k.cy - crop_rect.y)
        pixels = [Pixel(p.u - crop_rect.x, p.v - crop_rect.y) for p in pixels]

    logger.debug(
        f"Augmented {dims.width}x{dims.height} -> {resized.width}x{resized.height} "
        f"(scale {transform.scale_x:.4f}x{transform.scale_y:.4f}, crop {crop_rect})"
    )
    return AugmentResult(
        image=resized,
        intrinsics=new_k,
        pixels=pixels,
        transform=transform,
        crop=crop_rect,
        original_pixels=list(query_pixels),
    )
