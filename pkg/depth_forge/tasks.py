"""
QA generation for the six spatial tasks.

A ``Frame`` is one loaded sample: RGB image, principal-axis depth map in
meters, validity mask, intrinsics and optional world-from-camera pose. Ground
truth is always read from the original depth map at the original query pixel;
only the image goes through augmentation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, field_validator

from depth_forge import settings
from depth_forge.augment import AugmentConfig, AugmentResult, apply_augment
from depth_forge.errors import ConfigError, DomainError, InvariantError, OutOfBoundsError
from depth_forge.geometry import (
    Intrinsics,
    Pixel,
    back_project,
    camera_center,
    euclid_from_principal,
    ray_angles,
)
from depth_forge.markers import MarkerSpec, labelled_specs, render_marker, render_multi
from depth_forge.prompts import PromptContext, TemplateTable, build_answer, build_question, default_templates
from depth_forge.schemas import PromptVariant, TaskKind

logger = logging.getLogger(__name__)


@dataclass
class Frame:
    id: str
    dataset: str
    image: Image.Image
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    split: str = "eval"
    pose: Optional[np.ndarray] = None
    scene: Optional[str] = None

    def __post_init__(self):
        if self.depth.shape != self.mask.shape:
            raise InvariantError(f"frame {self.id}: depth {self.depth.shape} and mask {self.mask.shape} differ")
        if self.depth.shape != (self.image.height, self.image.width):
            raise InvariantError(
                f"frame {self.id}: depth {self.depth.shape} does not match image {self.image.width}x{self.image.height}"
            )

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height

    def is_valid(self, p: Pixel) -> bool:
        if not p.inside(self.width, self.height):
            return False
        row, col = p.to_index()
        return bool(self.mask[row, col]) and math.isfinite(self.depth[row, col]) and self.depth[row, col] > 0

    def depth_at(self, p: Pixel) -> float:
        if not self.is_valid(p):
            raise DomainError(f"frame {self.id}: no valid depth at ({p.u}, {p.v})")
        row, col = p.to_index()
        return float(self.depth[row, col])


class TaskConfig(BaseModel):
    tasks: List[TaskKind] = [TaskKind.DISTANCE]
    pixels_per_image: int = settings.PIXELS_PER_IMAGE
    given_time_range: Tuple[float, float] = settings.GIVEN_TIME_RANGE_S
    given_speed_range: Tuple[float, float] = settings.GIVEN_SPEED_RANGE_MPS
    pose_displacement_range: Tuple[float, float] = settings.POSE_DISPLACEMENT_RANGE_M
    max_resamples: int = settings.MAX_PIXEL_RESAMPLES

    @field_validator("given_time_range", "given_speed_range", "pose_displacement_range")
    @classmethod
    def _positive_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not 0 < lo <= hi:
            raise ValueError(f"invalid range {v}")
        return v

    @field_validator("pixels_per_image")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("pixels_per_image must be >= 1")
        return v


@dataclass
class QaOptions:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    marker: MarkerSpec = field(default_factory=MarkerSpec)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    templates: TemplateTable = field(default_factory=default_templates)


@dataclass
class QaRecord:
    sample_id: str
    task: TaskKind
    variant: PromptVariant
    dataset: str
    images: List[Image.Image]
    question: str
    answer: str
    gt_value: float
    source_ids: List[str] = field(default_factory=list)
    query_pixels: List[Dict[str, Any]] = field(default_factory=list)
    aux: Dict[str, Any] = field(default_factory=dict)
    transforms: List[Dict[str, Any]] = field(default_factory=list)
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.gt_value > 0:
            raise InvariantError(f"{self.sample_id}: gt_value must be positive, got {self.gt_value}")
        if len(self.images) != self.task.image_count:
            raise InvariantError(
                f"{self.sample_id}: task {self.task.value} needs {self.task.image_count} image(s), got {len(self.images)}"
            )

    @property
    def unit(self) -> str:
        return self.task.unit


def sample_query_pixels(depth: np.ndarray, mask: np.ndarray, k: int, rng: np.random.Generator) -> List[Pixel]:
    """``k`` distinct pixels drawn uniformly from the valid part of the map."""
    depth = np.asarray(depth)
    valid = np.asarray(mask, dtype=bool) & np.isfinite(depth) & (depth > 0)
    candidates = np.flatnonzero(valid)
    if k < 1:
        raise ConfigError(f"query pixel count must be >= 1, got {k}")
    if candidates.size < k:
        raise DomainError(f"need {k} valid pixels, the depth map has {candidates.size}")
    chosen = rng.choice(candidates, size=k, replace=False)
    rows, cols = np.unravel_index(chosen, valid.shape)
    return [Pixel(float(c), float(r)) for r, c in zip(rows, cols)]


def draw_given_values(task: TaskKind, rng: np.random.Generator, cfg: TaskConfig) -> Dict[str, float]:
    """Given time (speed task) or given speed (time task), rounded to one decimal."""
    if task == TaskKind.SPEED:
        return {"given_time": round(float(rng.uniform(*cfg.given_time_range)), 1)}
    if task == TaskKind.TIME:
        return {"given_speed": round(float(rng.uniform(*cfg.given_speed_range)), 1)}
    return {}


def pose_distance(pose_a: np.ndarray, pose_b: np.ndarray) -> float:
    return float(np.linalg.norm(camera_center(pose_a) - camera_center(pose_b)))


def compute_ground_truth(task: TaskKind, frames: Sequence[Frame], pixels: Sequence[Pixel],
                         given: Optional[Dict[str, float]] = None) -> float:
    """Full-precision answer for ``task``; rounding happens only in the answer text."""
    task = TaskKind(task)
    given = given or {}
    if task == TaskKind.POSE:
        if len(frames) != 2 or any(f.pose is None for f in frames):
            raise ConfigError("task 'pose' needs two frames with camera poses")
        return pose_distance(frames[0].pose, frames[1].pose)

    frame = frames[0]
    k = frame.intrinsics
    if task == TaskKind.TWO_POINT_DISTANCE:
        a = back_project(pixels[0], frame.depth_at(pixels[0]), k)
        b = back_project(pixels[1], frame.depth_at(pixels[1]), k)
        return a.distance_to(b)

    z = frame.depth_at(pixels[0])
    if task == TaskKind.PRINCIPAL_AXIS_DISTANCE:
        return z
    distance = euclid_from_principal(pixels[0], z, k)
    if task == TaskKind.SPEED:
        return distance / given["given_time"]
    if task == TaskKind.TIME:
        return distance / given["given_speed"]
    return distance


def _check_frames(task: TaskKind, frames: Sequence[Frame]) -> None:
    if task == TaskKind.POSE:
        if len(frames) != 2:
            raise ConfigError("task 'pose' needs exactly two frames")
        for frame in frames:
            if frame.pose is None:
                raise ConfigError(f"task 'pose' needs camera poses; frame {frame.id} has none")
    elif len(frames) != 1:
        raise ConfigError(f"task '{task.value}' takes one frame, got {len(frames)}")


def _resolve_pixels(frame: Frame, pixels: Sequence[Pixel], rng: np.random.Generator,
                    attempt: int) -> List[Pixel]:
    if attempt == 0 and all(frame.is_valid(p) for p in pixels):
        return list(pixels)
    logger.warning(f"Frame {frame.id}: resampling query pixels (attempt {max(attempt, 1)})")
    return sample_query_pixels(frame.depth, frame.mask, len(pixels), rng)


def _render(result: AugmentResult, variant: PromptVariant, marker: MarkerSpec) -> Image.Image:
    if not variant.uses_markers or not result.pixels:
        return result.image
    if len(result.pixels) == 1:
        return render_marker(result.image, result.pixels[0], marker)
    specs = labelled_specs(marker, len(result.pixels))
    return render_multi(result.image, list(zip(result.pixels, specs)))


def make_qa(frames: Sequence[Frame], task: TaskKind, pixels: Sequence[Pixel], rng: np.random.Generator,
            variant: PromptVariant = PromptVariant.MARKER_PLAIN, options: Optional[QaOptions] = None,
            sample_id: Optional[str] = None) -> QaRecord:
    """Augment, mark and phrase one question about ``frames``.

    Pixels with invalid depth (or that fall off the resized canvas) are
    replaced by fresh draws from the validity mask, a bounded number of times.
    """
    options = options or QaOptions()
    task, variant = TaskKind(task), PromptVariant(variant)
    _check_frames(task, frames)
    if len(pixels) != task.point_count:
        raise ConfigError(f"task '{task.value}' needs {task.point_count} query pixel(s), got {len(pixels)}")

    given = draw_given_values(task, rng, options.tasks)
    is_pose = task == TaskKind.POSE

    for attempt in range(options.tasks.max_resamples + 1):
        if not is_pose:
            pixels = _resolve_pixels(frames[0], pixels, rng, attempt)
        try:
            results = [
                apply_augment(
                    frame.image,
                    frame.intrinsics,
                    [] if is_pose else pixels,
                    options.augment,
                    rng,
                    crop=frame.split == "train" and not is_pose,
                )
                for frame in frames
            ]
        except OutOfBoundsError as e:
            logger.debug(f"Query pixels unusable after resize: {e}")
            continue
        break
    else:
        raise DomainError(
            f"frame {frames[0].id}: no usable query pixels after {options.tasks.max_resamples} resamples"
        )
    gt = compute_ground_truth(task, frames, pixels, given)

    images = [_render(result, variant, options.marker) for result in results]
    head = results[0]
    context = PromptContext(
        width=head.image.width,
        height=head.image.height,
        pixels=head.pixels,
        intrinsics=head.intrinsics,
        given_time=given.get("given_time"),
        given_speed=given.get("given_speed"),
    )
    angles = ray_angles(head.pixels[0], head.intrinsics) if variant == PromptVariant.RAY_THEN_DEPTH else None
    question = build_question(task, variant, context, options.templates)
    answer = build_answer(task, variant, gt, angles, options.templates)

    aux: Dict[str, Any] = dict(given)
    if angles is not None:
        aux["ray_angles"] = list(angles)
    record = QaRecord(
        sample_id=sample_id or f"{frames[0].id}:{task.value}",
        task=task,
        variant=variant,
        dataset=frames[0].dataset,
        images=images,
        question=question,
        answer=answer,
        gt_value=gt,
        source_ids=[f.id for f in frames],
        query_pixels=[
            {"original": o.to_list(), "transformed": t.to_list()}
            for o, t in zip(head.original_pixels, head.pixels)
        ],
        aux=aux,
        transforms=[r.transform.to_dict() for r in results],
    )
    logger.debug(f"QA {record.sample_id}: gt={gt:.4f} {task.unit}")
    return record


def pose_partners(anchor: Any, candidates: Sequence[Any], cfg: TaskConfig) -> List[Any]:
    """Frames (or manifest entries) from ``anchor``'s scene whose camera moved a
    distance inside ``cfg.pose_displacement_range``."""
    if anchor.pose is None:
        return []
    lo, hi = cfg.pose_displacement_range
    partners = []
    for other in candidates:
        if other.id == anchor.id or other.pose is None:
            continue
        if other.dataset != anchor.dataset or other.scene != anchor.scene:
            continue
        if lo <= pose_distance(np.asarray(anchor.pose), np.asarray(other.pose)) <= hi:
            partners.append(other)
    return partners
