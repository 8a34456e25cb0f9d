"""
Manifest-driven dataset access, weighted mixture sampling and SFT export.

A manifest is a JSONL file with one ``SampleManifestEntry`` per line. Image and
depth paths are resolved relative to the manifest's directory.
"""

import json
import logging
import math
import re
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple, TypeVar

import numpy as np
from PIL import Image
from pydantic import BaseModel, ValidationError, field_validator

from depth_forge import settings
from depth_forge.errors import ConfigError, ManifestError
from depth_forge.geometry import Intrinsics, is_rigid
from depth_forge.tasks import Frame, QaRecord
from depth_forge.utils import PathLike, dumps_record, image_to_png_bytes

logger = logging.getLogger(__name__)

T = TypeVar("T")

DepthEncoding = Literal["png16", "pfm", "npy"]


class IntrinsicsModel(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float

    @field_validator("fx", "fy")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not (v > 0 and math.isfinite(v)):
            raise ValueError("focal length must be positive and finite")
        return v

    @field_validator("cx", "cy")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("principal point must be finite")
        return v

    def to_intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)


class SampleManifestEntry(BaseModel):
    schema_version: str = settings.SCHEMA_VERSION
    id: str
    image_path: str
    depth_path: str
    depth_encoding: DepthEncoding = settings.DEFAULT_DEPTH_ENCODING
    depth_scale: float = settings.DEFAULT_DEPTH_SCALE
    intrinsics: IntrinsicsModel
    # 4x4 world-from-camera, row-major.
    pose: Optional[List[List[float]]] = None
    dataset: str
    split: Literal["train", "eval"] = "eval"
    scene: Optional[str] = None
    provenance: Optional[Dict[str, Any]] = None

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v: str) -> str:
        if v != settings.SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v!r}")
        return v

    @field_validator("id", "image_path", "depth_path", "dataset")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must not be empty")
        return v

    @field_validator("depth_scale")
    @classmethod
    def _positive_scale(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("depth_scale must be positive")
        return v

    @field_validator("pose")
    @classmethod
    def _rigid(cls, v: Optional[List[List[float]]]) -> Optional[List[List[float]]]:
        if v is None:
            return v
        if len(v) != 4 or any(len(row) != 4 for row in v):
            raise ValueError("pose must be a 4x4 matrix")
        if not is_rigid(np.asarray(v, dtype=np.float64)):
            raise ValueError("pose rotation block is not orthonormal within 1e-4")
        return v

    @property
    def pose_matrix(self) -> Optional[np.ndarray]:
        return None if self.pose is None else np.asarray(self.pose, dtype=np.float64)

    def to_json(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)


class DatasetIndex:
    """Validated, immutable view of a manifest."""

    def __init__(self, entries: Sequence[SampleManifestEntry], root: PathLike):
        self.entries: Tuple[SampleManifestEntry, ...] = tuple(entries)
        self.root = Path(root)
        self.by_id: Dict[str, SampleManifestEntry] = {e.id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[SampleManifestEntry]:
        return iter(self.entries)

    def counts(self) -> Dict[str, int]:
        counter = Counter(e.dataset for e in self.entries)
        return dict(sorted(counter.items()))

    def by_dataset(self, split: Optional[str] = None) -> "OrderedDict[str, List[SampleManifestEntry]]":
        grouped: "OrderedDict[str, List[SampleManifestEntry]]" = OrderedDict()
        for entry in self.entries:
            if split is None or entry.split == split:
                grouped.setdefault(entry.dataset, []).append(entry)
        return OrderedDict(sorted(grouped.items()))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def _error_field(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"])


def load_manifest(path: PathLike) -> DatasetIndex:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    entries: List[SampleManifestEntry] = []
    seen: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", line=line_number) from e
            if not isinstance(raw, dict):
                raise ManifestError("expected a JSON object", line=line_number)
            try:
                entry = SampleManifestEntry.model_validate(raw)
            except ValidationError as e:
                first = e.errors()[0]
                raise ManifestError(first["msg"], line=line_number, field=_error_field(e)) from e
            if entry.id in seen:
                raise ManifestError(
                    f"duplicate id {entry.id!r} (first seen on line {seen[entry.id]})", line=line_number, field="id"
                )
            seen[entry.id] = line_number
            entries.append(entry)
    if not entries:
        raise ManifestError(f"empty manifest: {path}")
    index = DatasetIndex(entries, path.parent)
    logger.info(f"Loaded manifest {path}: {len(index)} entries, counts {index.counts()}")
    return index


def write_manifest(entries: Sequence[SampleManifestEntry], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(dumps_record(entry.to_json()) + "\n")
    return path


def read_pfm(path: PathLike) -> np.ndarray:
    """Single- or three-channel PFM; the first channel is returned, top row first."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ConfigError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        dims = f.readline().split()
        scale = float(f.readline().strip())
        width, height = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=width * height * channels)
    data = data.reshape(height, width, channels)[:, :, 0]
    return np.flipud(data).astype(np.float64)


def write_pfm(path: PathLike, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ConfigError("PFM writer expects a 2D array")
    height, width = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def _read_raw_depth(path: Path, encoding: str) -> np.ndarray:
    if not path.is_file():
        raise ConfigError(f"depth file not found: {path}")
    if encoding == "png16":
        with Image.open(path) as img:
            raw = np.array(img)
    elif encoding == "pfm":
        raw = read_pfm(path)
    elif encoding == "npy":
        raw = np.load(path, allow_pickle=False)
    else:
        raise ConfigError(f"unknown depth_encoding {encoding!r}")
    if raw.ndim != 2:
        raise ConfigError(f"{path}: depth must be a single-channel 2D grid, got shape {raw.shape}")
    return raw.astype(np.float64)


def read_depth(entry: SampleManifestEntry, root: Optional[PathLike] = None,
               max_depth: float = settings.MAX_DEPTH_M,
               expected_size: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Depth in meters and its validity mask.

    Invalid pixels (raw 0, non-finite, or beyond ``max_depth``) are zeroed
    and masked out. ``expected_size`` is the image's (width, height).
    """
    path = Path(entry.depth_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    raw = _read_raw_depth(path, entry.depth_encoding)
    if expected_size is not None and raw.shape != (expected_size[1], expected_size[0]):
        raise ConfigError(
            f"{entry.id}: depth is {raw.shape[1]}x{raw.shape[0]} but the image is {expected_size[0]}x{expected_size[1]}"
        )
    with np.errstate(invalid="ignore", over="ignore"):
        depth = raw * entry.depth_scale
        mask = np.isfinite(raw) & (raw != 0) & np.isfinite(depth) & (depth > 0) & (depth <= max_depth)
    depth = np.where(mask, depth, 0.0)
    return depth, mask


def load_frame(index: DatasetIndex, entry: SampleManifestEntry, max_depth: float = settings.MAX_DEPTH_M) -> Frame:
    image_path = index.resolve(entry.image_path)
    if not image_path.is_file():
        raise ConfigError(f"image not found for {entry.id}: {image_path}")
    with Image.open(image_path) as img:
        image = img.convert("RGB")
    depth, mask = read_depth(entry, index.root, max_depth, expected_size=image.size)
    return Frame(
        id=entry.id,
        dataset=entry.dataset,
        image=image,
        depth=depth,
        mask=mask,
        intrinsics=entry.intrinsics.to_intrinsics(),
        split=entry.split,
        pose=entry.pose_matrix,
        scene=entry.scene,
    )


def load_frames(index: DatasetIndex, entries: Sequence[SampleManifestEntry], workers: int = 4,
                max_depth: float = settings.MAX_DEPTH_M) -> List[Frame]:
    """Parallel ``load_frame``; results keep the order of ``entries``."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda e: load_frame(index, e, max_depth), entries))


class MixtureSpec(BaseModel):
    weights: Dict[str, float] = {}
    # None: the pipeline seed is used.
    seed: Optional[int] = None

    @field_validator("weights")
    @classmethod
    def _non_negative(cls, v: Dict[str, float]) -> Dict[str, float]:
        for name, weight in v.items():
            if not weight >= 0:
                raise ValueError(f"weight for {name!r} must be >= 0")
        return v

    def resolved_weights(self, names: Sequence[str]) -> Dict[str, float]:
        """Explicit weights, falling back to 1 (0.1 for down-weighted datasets)."""
        unknown = sorted(set(self.weights) - set(names))
        if unknown:
            raise ConfigError(f"mixture weights reference unknown dataset(s) {unknown}")
        resolved = {
            name: self.weights.get(name, settings.DOWNWEIGHTED_DATASETS.get(name.lower(), 1.0))
            for name in sorted(names)
        }
        if not any(w > 0 for w in resolved.values()):
            raise ConfigError("mixture needs at least one positive weight")
        return resolved


def mixture_stream(spec: MixtureSpec, datasets: Dict[str, Sequence[T]]) -> Iterator[T]:
    """Endless deterministic stream: dataset drawn by weight, then the next item
    of that dataset's current shuffled epoch."""
    weights = spec.resolved_weights(list(datasets))
    names = [n for n, w in weights.items() if w > 0]
    for name in names:
        if not datasets[name]:
            raise ConfigError(f"dataset {name!r} has a positive mixture weight but no entries")
    p = np.array([weights[n] for n in names], dtype=np.float64)
    p /= p.sum()

    choice_seq, shuffle_seq = np.random.SeedSequence(spec.seed or 0).spawn(2)
    choice_rng = np.random.default_rng(choice_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    orders: Dict[str, np.ndarray] = {}
    positions = {name: 0 for name in names}
    batch = 4096

    while True:
        for pick in choice_rng.choice(len(names), size=batch, p=p):
            name = names[pick]
            items = datasets[name]
            if name not in orders or positions[name] >= len(items):
                orders[name] = shuffle_rng.permutation(len(items))
                positions[name] = 0
            yield items[orders[name][positions[name]]]
            positions[name] += 1


def eval_budget(index: DatasetIndex, per_dataset: int, split: Optional[str] = "eval") -> Dict[str, int]:
    """Queries per entry: ``per_dataset`` spread round-robin over each dataset's entries."""
    budget: Dict[str, int] = {}
    for name, entries in index.by_dataset(split).items():
        n = len(entries)
        for i, entry in enumerate(entries):
            count = per_dataset // n + (1 if i < per_dataset % n else 0)
            if count:
                budget[entry.id] = count
    return budget


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _image_name(sample_id: str, i: int) -> str:
    return f"{_UNSAFE.sub('_', sample_id)}_{i}.png"


def sft_line(record: QaRecord, image_files: Sequence[str]) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "variant": record.variant.value,
        "dataset": record.dataset,
        "source_ids": list(record.source_ids),
        "seed": record.seed,
        "query_pixels": record.query_pixels,
        "aux": record.aux,
        "transforms": record.transforms,
    }
    return {
        "schema_version": settings.SCHEMA_VERSION,
        "id": record.sample_id,
        "task": record.task.value,
        "images": list(image_files),
        "question": record.question,
        "answer": record.answer,
        "gt_value": record.gt_value,
        "unit": record.unit,
        "meta": meta,
    }


def export_sft(records: Iterable[QaRecord], out_dir: PathLike, filename: str = "sft.jsonl") -> Path:
    """Write every record's images under ``out_dir/images`` and one JSONL line per record.

    ``records`` is consumed lazily, so a generator keeps memory flat.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    names_used: Dict[str, str] = {}
    count = 0
    path = out_dir / filename
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            files = []
            for i, image in enumerate(record.images):
                name = _image_name(record.sample_id, i)
                if name in names_used:
                    raise ConfigError(
                        f"image filename collision: {name} for {record.sample_id} and {names_used[name]}"
                    )
                names_used[name] = record.sample_id
                (image_dir / name).write_bytes(image_to_png_bytes(image))
                files.append(f"images/{name}")
            f.write(dumps_record(sft_line(record, files)) + "\n")
            count += 1
    logger.info(f"Exported {count} SFT records ({len(names_used)} images) to {path}")
    return path
