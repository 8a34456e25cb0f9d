"""
Visual markers pointing at query pixels.

Markers are drawn on the augmented image right before it is encoded for the
model. Every marker touches only pixels inside ``marker_bbox``; labels for
multi-point questions are drawn as white text on a box of the marker color
next to the marker's tail.
"""

import logging
import math
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

from PIL import Image, ImageDraw, ImageFont
from pydantic import BaseModel, field_validator, model_validator

from depth_forge import settings
from depth_forge.errors import ConfigError, OutOfBoundsError
from depth_forge.geometry import Pixel

logger = logging.getLogger(__name__)

Box = Tuple[int, int, int, int]
Direction = Tuple[int, int]

# Arrow pointing down-right: its body extends up-left of the tip.
DEFAULT_DIRECTION: Direction = (1, 1)
LABEL_PADDING = 2


class MarkerStyle(str, Enum):
    ARROW = "arrow"
    CROSS = "cross"
    CIRCLE = "circle"


class MarkerSpec(BaseModel):
    style: MarkerStyle = MarkerStyle(settings.MARKER_STYLE)
    stroke_width: int = settings.MARKER_STROKE_WIDTH
    size: int = settings.MARKER_SIZE
    color: Tuple[int, int, int] = settings.MARKER_COLOR
    label: Optional[str] = None

    @field_validator("stroke_width")
    @classmethod
    def _stroke(cls, v: int) -> int:
        if v < 1:
            raise ValueError("stroke_width must be >= 1")
        return v

    @field_validator("color")
    @classmethod
    def _rgb(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(c < 0 or c > 255 for c in v):
            raise ValueError("color channels must be in [0, 255]")
        return v

    @field_validator("label")
    @classmethod
    def _label(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not 0 < len(v) <= settings.MARKER_LABEL_MAX_CHARS:
            raise ValueError(f"label must have 1..{settings.MARKER_LABEL_MAX_CHARS} characters")
        return v

    @model_validator(mode="after")
    def _size_covers_stroke(self) -> "MarkerSpec":
        if self.size < self.stroke_width:
            raise ValueError("size must be >= stroke_width")
        return self


@lru_cache(maxsize=1)
def _label_font() -> ImageFont.ImageFont:
    # Pillow's bundled default font: no system font lookup, identical everywhere.
    return ImageFont.load_default()


def _pad(spec: MarkerSpec) -> int:
    return spec.stroke_width // 2 + 2


def _head_length(spec: MarkerSpec) -> float:
    return max(spec.size * 0.35, spec.stroke_width * 2.0)


def _glyph_box(p: Pixel, spec: MarkerSpec, direction: Direction) -> Box:
    pad = _pad(spec)
    if spec.style == MarkerStyle.ARROW:
        tail_u = p.u - direction[0] * spec.size
        tail_v = p.v - direction[1] * spec.size
        xs, ys = (p.u, tail_u), (p.v, tail_v)
    else:
        half = spec.size / 2.0
        xs, ys = (p.u - half, p.u + half), (p.v - half, p.v + half)
    return (
        math.floor(min(xs)) - pad,
        math.floor(min(ys)) - pad,
        math.ceil(max(xs)) + pad + 1,
        math.ceil(max(ys)) + pad + 1,
    )


def _label_box(p: Pixel, spec: MarkerSpec, direction: Direction, image_size: Tuple[int, int]) -> Optional[Box]:
    if not spec.label:
        return None
    left, top, right, bottom = _label_font().getbbox(spec.label)
    w = (right - left) + 2 * LABEL_PADDING
    h = (bottom - top) + 2 * LABEL_PADDING
    gx0, gy0, gx1, gy1 = _glyph_box(p, spec, direction)
    # Beyond the tail end of the glyph, away from the tip.
    x0 = gx0 - w if direction[0] > 0 else gx1
    y0 = gy0 - h if direction[1] > 0 else gy1
    width, height = image_size
    x0 = min(max(x0, 0), max(width - w, 0))
    y0 = min(max(y0, 0), max(height - h, 0))
    return int(x0), int(y0), int(x0 + w), int(y0 + h)


def marker_bbox(p: Pixel, spec: MarkerSpec, direction: Direction = DEFAULT_DIRECTION,
                image_size: Optional[Tuple[int, int]] = None) -> List[Box]:
    """Boxes ``(x0, y0, x1, y1)``, end-exclusive, covering every pixel the marker may touch."""
    boxes = [_glyph_box(p, spec, direction)]
    if spec.label:
        boxes.append(_label_box(p, spec, direction, image_size or (1 << 30, 1 << 30)))
    return boxes


def choose_direction(p: Pixel, spec: MarkerSpec, image_size: Tuple[int, int]) -> Direction:
    """Default down-right arrow, flipped per axis when the body would leave the image."""
    width, height = image_size
    reach = spec.size + _pad(spec)
    dx = 1 if p.u - reach >= 0 or p.u + reach >= width else -1
    dy = 1 if p.v - reach >= 0 or p.v + reach >= height else -1
    return dx, dy


def _check_inside(image: Image.Image, p: Pixel) -> None:
    if not p.inside(image.width, image.height):
        raise OutOfBoundsError(f"pixel ({p.u}, {p.v}) outside {image.width}x{image.height} image")


def _draw_glyph(draw: ImageDraw.ImageDraw, p: Pixel, spec: MarkerSpec, direction: Direction) -> None:
    color = tuple(spec.color)
    stroke = spec.stroke_width
    tip = (p.u, p.v)
    if spec.style == MarkerStyle.ARROW:
        tail = (p.u - direction[0] * spec.size, p.v - direction[1] * spec.size)
        head = _head_length(spec)
        draw.line([tail, tip], fill=color, width=stroke)
        draw.line([tip, (p.u - direction[0] * head, p.v)], fill=color, width=stroke)
        draw.line([tip, (p.u, p.v - direction[1] * head)], fill=color, width=stroke)
    elif spec.style == MarkerStyle.CROSS:
        half = spec.size / 2.0
        draw.line([(p.u - half, p.v), (p.u + half, p.v)], fill=color, width=stroke)
        draw.line([(p.u, p.v - half), (p.u, p.v + half)], fill=color, width=stroke)
    else:
        r = spec.size / 2.0
        draw.ellipse([p.u - r, p.v - r, p.u + r, p.v + r], outline=color, width=stroke)
    dot = max(stroke / 2.0, 1.0)
    draw.ellipse([p.u - dot, p.v - dot, p.u + dot, p.v + dot], fill=color)


def _draw_label(draw: ImageDraw.ImageDraw, box: Box, spec: MarkerSpec) -> None:
    font = _label_font()
    left, top, _, _ = font.getbbox(spec.label)
    draw.rectangle([box[0], box[1], box[2] - 1, box[3] - 1], fill=tuple(spec.color))
    draw.text(
        (box[0] + LABEL_PADDING - left, box[1] + LABEL_PADDING - top),
        spec.label,
        fill=(255, 255, 255),
        font=font,
    )


def _render_onto(image: Image.Image, p: Pixel, spec: MarkerSpec, direction: Optional[Direction]) -> Direction:
    direction = direction or choose_direction(p, spec, image.size)
    draw = ImageDraw.Draw(image)
    _draw_glyph(draw, p, spec, direction)
    if spec.label:
        _draw_label(draw, _label_box(p, spec, direction, image.size), spec)
    return direction


def render_marker(image: Image.Image, p: Pixel, spec: Optional[MarkerSpec] = None,
                  direction: Optional[Direction] = None) -> Image.Image:
    """Copy of ``image`` with one marker whose tip sits on ``p``."""
    spec = spec or MarkerSpec()
    _check_inside(image, p)
    rendered = image.convert("RGB").copy()
    _render_onto(rendered, p, spec, direction)
    return rendered


def render_multi(image: Image.Image, points: Sequence[Tuple[Pixel, MarkerSpec]]) -> Image.Image:
    """Copy of ``image`` with one (usually labelled) marker per point."""
    if not points:
        raise ConfigError("render_multi needs at least one point")
    labels = [spec.label for _, spec in points if spec.label]
    if len(labels) != len(set(labels)):
        raise ConfigError(f"duplicate marker labels: {labels}")
    for p, _ in points:
        _check_inside(image, p)
    rendered = image.convert("RGB").copy()
    for p, spec in points:
        direction = _render_onto(rendered, p, spec, None)
        logger.debug(f"Marker {spec.label or '-'} at ({p.u:.1f}, {p.v:.1f}) direction {direction}")
    return rendered


def labelled_specs(base: MarkerSpec, count: int) -> List[MarkerSpec]:
    """``count`` copies of ``base`` labelled A, B, C, ..."""
    return [base.model_copy(update={"label": chr(ord("A") + i)}) for i in range(count)]
