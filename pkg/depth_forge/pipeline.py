"""
Run configuration and the drivers behind each ``forge`` subcommand.

Every driver takes a resolved ``PipelineConfig``, writes its artifacts under
an output directory together with ``resolved_config.yaml``, and derives all
randomness from ``PipelineConfig.seed``.
"""

import functools
import logging
import math
from collections import OrderedDict, defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, AsyncIterator, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from depth_forge import config, settings
from depth_forge.augment import AugmentConfig, ImageDims, apply_augment, transform_pixel
from depth_forge.client import (
    ConstantAnswerer,
    EndpointConfig,
    ModelQuery,
    OracleAnswerer,
    OracleConfig,
    QueryOutcome,
    VlmAnswerer,
    VlmClient,
    run_queries,
)
from depth_forge.data import (
    DatasetIndex,
    MixtureSpec,
    SampleManifestEntry,
    eval_budget,
    export_sft,
    load_frame,
    load_manifest,
    mixture_stream,
)
from depth_forge.errors import ConfigError, DomainError, OutOfBoundsError, ParseError, TransportError
from depth_forge.geometry import Intrinsics, Pixel, euclid_from_principal
from depth_forge.markers import MarkerSpec, labelled_specs, render_marker, render_multi
from depth_forge.metrics import (
    DeltaMode,
    GrpoConfig,
    MetricReport,
    SampleRecord,
    aggregate,
    group_advantages,
    grpo_reward,
    score_sample,
    write_report,
)
from depth_forge.pointcloud import PointCloud, QueryLog, assemble, depth_colors, grid_pixels, summarize, write_ply
from depth_forge.prompts import (
    PromptContext,
    TemplateTable,
    build_question,
    check_format,
    load_templates,
    parse_answer,
)
from depth_forge.schemas import ParseStatus, PromptVariant, TaskKind
from depth_forge.tasks import Frame, QaOptions, QaRecord, TaskConfig, make_qa, pose_partners, sample_query_pixels
from depth_forge.utils import PathLike, derive_seed, dumps_record, iter_jsonl

try:
    import tomllib
except ImportError:  # Python < 3.11
    tomllib = None

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.yaml"


class PromptSection(BaseModel):
    variant: PromptVariant = PromptVariant.MARKER_PLAIN
    # Path to a template table overriding the bundled one.
    templates: Optional[str] = None


class PrepareSection(BaseModel):
    # None: every manifest entry once; otherwise this many mixture draws.
    samples: Optional[int] = None
    split: Optional[Literal["train", "eval"]] = None
    filename: str = "sft.jsonl"

    @field_validator("samples")
    @classmethod
    def _positive(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 1:
            raise ValueError("samples must be >= 1")
        return v


class EvalSection(BaseModel):
    samples_per_dataset: int = settings.EVAL_SAMPLES_PER_DATASET
    split: Optional[Literal["train", "eval"]] = "eval"
    constant: float = settings.CONSTANT_BASELINE_M
    abort_ratio: float = settings.TRANSPORT_FAILURE_ABORT_RATIO
    # Queries rendered and sent per round; the abort check runs after each.
    batch_size: int = 256
    progress: bool = True

    @field_validator("samples_per_dataset", "batch_size")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("constant")
    @classmethod
    def _positive_constant(cls, v: float) -> float:
        if not (v > 0 and math.isfinite(v)):
            raise ValueError("constant must be a positive distance")
        return v


class MetricsSection(BaseModel):
    delta_mode: DeltaMode = DeltaMode.RATIO
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)


class PointcloudSection(BaseModel):
    grid: int = settings.POINTCLOUD_GRID_PIXELS
    depth_colors: bool = False
    # Grid queries per round; answers are logged after each round.
    batch_size: int = 512


class PipelineConfig(BaseModel):
    seed: int = 0
    max_depth: float = settings.MAX_DEPTH_M
    workers: int = config.FORGE_WORKERS
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    marker: MarkerSpec = Field(default_factory=MarkerSpec)
    prompt: PromptSection = Field(default_factory=PromptSection)
    tasks: TaskConfig = Field(default_factory=TaskConfig)
    mixture: MixtureSpec = Field(default_factory=MixtureSpec)
    prepare: PrepareSection = Field(default_factory=PrepareSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    pointcloud: PointcloudSection = Field(default_factory=PointcloudSection)
    endpoint: Optional[EndpointConfig] = None
    oracle: Optional[OracleConfig] = None

    @model_validator(mode="after")
    def _one_answer_source(self) -> "PipelineConfig":
        if self.endpoint is not None and self.oracle is not None:
            raise ValueError("configure either an endpoint or an oracle section, not both")
        return self

    def templates(self) -> TemplateTable:
        return load_templates(self.prompt.templates)

    def qa_options(self, crop: bool = True) -> QaOptions:
        augment = self.augment if crop else self.augment.model_copy(update={"crop_enabled": False})
        return QaOptions(augment=augment, marker=self.marker, tasks=self.tasks, templates=self.templates())

    def require_answer_source(self) -> str:
        if self.endpoint is not None:
            return "endpoint"
        if self.oracle is not None:
            return "oracle"
        raise ConfigError("this command needs an endpoint or an oracle section in the config")


def read_config_file(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        if tomllib is None:
            raise ConfigError(f"{path}: TOML configs need Python 3.11+, use YAML instead")
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {e}") from e
    else:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of sections at the top level")
    return data


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (``eval.samples_per_dataset``) on a nested dict; None values are skipped."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"cannot override {dotted}: {key} is not a section")
            node = child
        node[leaf] = value
    return data


def load_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """File values over defaults, then flag values over file values."""
    data = read_config_file(path) if path is not None else {}
    apply_overrides(data, overrides or {})
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"invalid config at {where}: {first['msg']}") from e
    logger.debug(f"Resolved config: seed={cfg.seed} variant={cfg.prompt.variant.value} "
                 f"tasks={[t.value for t in cfg.tasks.tasks]}")
    return cfg


def write_resolved_config(cfg: PipelineConfig, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=False)
    return path


# QA rendering shared by prepare and eval
# ---------------------------------------

class _SceneIndex:
    """Manifest entries grouped by (dataset, scene) for pose pairing."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self.groups: Dict[Tuple[str, Optional[str]], List[SampleManifestEntry]] = defaultdict(list)
        for entry in index:
            if entry.pose is not None:
                self.groups[(entry.dataset, entry.scene)].append(entry)

    @property
    def has_poses(self) -> bool:
        return bool(self.groups)

    def partners(self, entry: SampleManifestEntry, cfg: TaskConfig) -> List[SampleManifestEntry]:
        return pose_partners(entry, self.groups.get((entry.dataset, entry.scene), []), cfg)


def _check_tasks(cfg: PipelineConfig, scenes: _SceneIndex) -> None:
    if TaskKind.POSE in cfg.tasks.tasks and not scenes.has_poses:
        raise ConfigError("task 'pose' needs camera poses, but no manifest entry has a pose")
    if cfg.prompt.variant == PromptVariant.RAY_THEN_DEPTH:
        others = [t.value for t in cfg.tasks.tasks if t not in (TaskKind.DISTANCE, TaskKind.PRINCIPAL_AXIS_DISTANCE)]
        if others:
            raise ConfigError(f"variant 'ray_then_depth' only applies to distance tasks, not {others}")


def _task_records(cfg: PipelineConfig, options: QaOptions, scenes: _SceneIndex, frame: Frame,
                  entry: SampleManifestEntry, task: TaskKind, count: int, tag: str) -> List[QaRecord]:
    """Up to ``count`` QA records about one frame; unusable samples are skipped with a warning."""
    rng = np.random.default_rng(derive_seed(cfg.seed, f"{entry.id}:{task.value}:{tag}"))
    records: List[QaRecord] = []

    if task == TaskKind.POSE:
        partners = scenes.partners(entry, cfg.tasks)
        if not partners:
            logger.debug(f"{entry.id}: no pose partner within {cfg.tasks.pose_displacement_range} m")
            return records
        for j in range(count):
            partner = partners[int(rng.integers(len(partners)))]
            frames = [frame, load_frame(scenes.index, partner, cfg.max_depth)]
            try:
                records.append(make_qa(frames, task, [], rng, cfg.prompt.variant, options,
                                       sample_id=f"{entry.id}-{task.value}-{tag}-{j}"))
            except DomainError as e:
                logger.warning(f"{entry.id}: skipping {task.value} sample {j} with {partner.id}: {e}")
        return records

    per_record = task.point_count
    available = int(np.count_nonzero(frame.mask))
    if available < count * per_record:
        logger.warning(f"{entry.id}: {available} valid pixels, fewer than the {count * per_record} requested")
        count = available // per_record
    if count == 0:
        return records
    pixels = sample_query_pixels(frame.depth, frame.mask, count * per_record, rng)
    for j in range(count):
        chunk = pixels[j * per_record:(j + 1) * per_record]
        try:
            records.append(make_qa([frame], task, chunk, rng, cfg.prompt.variant, options,
                                   sample_id=f"{entry.id}-{task.value}-{tag}-{j}"))
        except DomainError as e:
            logger.warning(f"{entry.id}: skipping {task.value} sample {j}: {e}")
    return records


def _entry_records(cfg: PipelineConfig, options: QaOptions, scenes: _SceneIndex,
                   job: Tuple[SampleManifestEntry, int, str]) -> List[QaRecord]:
    entry, count, tag = job
    frame = load_frame(scenes.index, entry, cfg.max_depth)
    records: List[QaRecord] = []
    for task in cfg.tasks.tasks:
        records.extend(_task_records(cfg, options, scenes, frame, entry, task, count, tag))
    return records


def _render_jobs(cfg: PipelineConfig, options: QaOptions, scenes: _SceneIndex,
                 jobs: Sequence[Tuple[SampleManifestEntry, int, str]]) -> Iterator[QaRecord]:
    """Records for every job, in job order; frames load and render on the worker pool."""
    work = functools.partial(_entry_records, cfg, options, scenes)
    window = max(1, cfg.workers) * 4
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        for start in range(0, len(jobs), window):
            for records in pool.map(work, jobs[start:start + window]):
                yield from records


# prepare
# -------

def _prepare_jobs(cfg: PipelineConfig, index: DatasetIndex) -> List[Tuple[SampleManifestEntry, int, str]]:
    count = cfg.tasks.pixels_per_image
    if cfg.prepare.samples is None:
        return [(entry, count, "0") for entry in index if cfg.prepare.split in (None, entry.split)]

    datasets = index.by_dataset(cfg.prepare.split)
    if not datasets:
        raise ConfigError(f"no manifest entries in split {cfg.prepare.split!r}")
    spec = cfg.mixture
    if spec.seed is None:
        spec = spec.model_copy(update={"seed": cfg.seed})
    stream = mixture_stream(spec, datasets)
    # The draw number keeps repeated entries distinct across epochs.
    return [(next(stream), count, f"d{draw}") for draw in range(cfg.prepare.samples)]


def run_prepare(cfg: PipelineConfig, manifest: PathLike, out_dir: PathLike) -> Dict[str, int]:
    """Render SFT records for the manifest; returns the record count per task."""
    index = load_manifest(manifest)
    scenes = _SceneIndex(index)
    _check_tasks(cfg, scenes)
    write_resolved_config(cfg, out_dir)
    jobs = _prepare_jobs(cfg, index)
    if not jobs:
        raise ConfigError(f"no manifest entries to prepare (split {cfg.prepare.split!r})")

    counts: "OrderedDict[str, int]" = OrderedDict((t.value, 0) for t in cfg.tasks.tasks)

    def counted(records: Iterator[QaRecord]) -> Iterator[QaRecord]:
        for record in records:
            counts[record.task.value] += 1
            yield record

    options = cfg.qa_options(crop=True)
    export_sft(counted(_render_jobs(cfg, options, scenes, jobs)), out_dir, cfg.prepare.filename)
    for task, n in counts.items():
        logger.info(f"Prepared {n} {task} records")
    return dict(counts)


# eval / baseline
# ---------------

def _query_from_record(record: QaRecord) -> ModelQuery:
    return ModelQuery(
        sample_id=record.sample_id,
        task=record.task,
        variant=record.variant,
        dataset=record.dataset,
        prompt=record.question,
        gt_value=record.gt_value,
        images=record.images,
        aux=record.aux,
    )


def _parse_outcome(outcome: QueryOutcome, table: TemplateTable):
    if outcome.error is not None or outcome.text is None:
        return None
    query = outcome.query
    try:
        return parse_answer(outcome.text, query.variant, query.task, table)
    except ParseError as e:
        logger.debug(f"Query {query.sample_id}: unparsable answer ({e.reason})")
        return e


@asynccontextmanager
async def open_answerer(cfg: PipelineConfig, table: TemplateTable) -> AsyncIterator[Any]:
    """The endpoint client or the mock oracle, whichever the config names."""
    if cfg.require_answer_source() == "oracle":
        oracle = cfg.oracle
        if oracle.seed is None:
            oracle = oracle.model_copy(update={"seed": cfg.seed})
        yield OracleAnswerer(oracle, table)
        return
    async with VlmClient(cfg.endpoint) as client:
        yield VlmAnswerer(client)


def _eval_batches(jobs: Sequence[Tuple[SampleManifestEntry, int, str]], batch_size: int,
                  tasks: int) -> Iterator[List[Tuple[SampleManifestEntry, int, str]]]:
    batch: List[Tuple[SampleManifestEntry, int, str]] = []
    size = 0
    for job in jobs:
        batch.append(job)
        size += job[1] * tasks
        if size >= batch_size:
            yield batch
            batch, size = [], 0
    if batch:
        yield batch


async def evaluate(cfg: PipelineConfig, manifest: PathLike, out_dir: PathLike, answerer: Any) -> MetricReport:
    """Sample, render, query, parse and score; writes the report files under ``out_dir``.

    More than ``eval.abort_ratio`` transport failures stops the run after the
    current batch: the partial report is written, flagged, and TransportError
    is raised.
    """
    index = load_manifest(manifest)
    scenes = _SceneIndex(index)
    _check_tasks(cfg, scenes)
    table = cfg.templates()
    options = cfg.qa_options(crop=False)
    write_resolved_config(cfg, out_dir)

    budget = eval_budget(index, cfg.eval.samples_per_dataset, cfg.eval.split)
    if not budget:
        raise ConfigError(f"no manifest entries in split {cfg.eval.split!r}")
    jobs = [(index.by_id[entry_id], count, "eval") for entry_id, count in budget.items()]
    logger.info(f"Evaluating {sum(budget.values())} samples per task over {len(budget)} entries")

    records: List[SampleRecord] = []
    flags: List[str] = []
    transport_failures = 0
    for batch in _eval_batches(jobs, cfg.eval.batch_size, len(cfg.tasks.tasks)):
        queries = [_query_from_record(r) for r in _render_jobs(cfg, options, scenes, batch)]
        outcomes = await run_queries(answerer, queries, progress=cfg.eval.progress, description="eval")
        for outcome in outcomes:
            query = outcome.query
            records.append(score_sample(query.sample_id, query.task, query.dataset, query.gt_value,
                                        _parse_outcome(outcome, table), outcome.text or "",
                                        cfg.metrics.delta_mode))
        transport_failures += sum(1 for o in outcomes if o.transport_failed)
        if records and transport_failures / len(records) > cfg.eval.abort_ratio:
            flags.append(f"aborted: {transport_failures} of {len(records)} queries failed in transport")
            logger.error(f"Aborting evaluation: {flags[-1]}")
            break

    if not records:
        raise ConfigError("evaluation produced no samples; check the manifest's valid depth")
    report = aggregate(records, flags)
    write_report(report, out_dir)
    if flags:
        raise TransportError(f"evaluation aborted, partial report in {out_dir}")
    return report


async def run_eval(cfg: PipelineConfig, manifest: PathLike, out_dir: PathLike) -> MetricReport:
    async with open_answerer(cfg, cfg.templates()) as answerer:
        return await evaluate(cfg, manifest, out_dir, answerer)


async def run_baseline(cfg: PipelineConfig, manifest: PathLike, out_dir: PathLike,
                       constant: Optional[float] = None) -> MetricReport:
    """``evaluate`` with a model that always answers ``constant`` meters."""
    value = cfg.eval.constant if constant is None else constant
    logger.info(f"Constant baseline: always {value} m")
    return await evaluate(cfg, manifest, out_dir, ConstantAnswerer(value, cfg.templates()))


# reward
# ------

def _rollout_field(row: Dict[str, Any], line: int, *names: str) -> Any:
    for name in names:
        if name in row:
            return row[name]
    raise ConfigError(f"rollouts line {line}: missing field {names[0]!r}")


def run_reward(cfg: PipelineConfig, rollouts: PathLike, out_path: PathLike) -> List[Dict[str, Any]]:
    """Reward and group advantage for every rollout, one JSONL line each.

    Rollouts are grouped by ``sample_id`` in order of first appearance; each
    group must hold exactly ``metrics.grpo.group_size`` rollouts.
    """
    grpo = cfg.metrics.grpo
    table = cfg.templates()
    if not Path(rollouts).is_file():
        raise ConfigError(f"rollouts file not found: {rollouts}")
    groups: "OrderedDict[str, List[Tuple[int, Dict[str, Any]]]]" = OrderedDict()
    try:
        for line, row in iter_jsonl(rollouts):
            sample_id = str(_rollout_field(row, line, "sample_id", "id"))
            groups.setdefault(sample_id, []).append((line, row))
    except ValueError as e:
        raise ConfigError(f"rollouts file {rollouts} is not valid JSONL: {e}") from e
    if not groups:
        raise ConfigError(f"rollouts file {rollouts} is empty")

    results: List[Dict[str, Any]] = []
    for sample_id, rows in groups.items():
        if len(rows) != grpo.group_size:
            raise ConfigError(
                f"rollout group {sample_id!r} has {len(rows)} rollouts, expected {grpo.group_size}"
            )
        gts = {float(_rollout_field(row, line, "gt_value", "gt")) for line, row in rows}
        if len(gts) != 1:
            raise ConfigError(f"rollout group {sample_id!r} disagrees on gt_value: {sorted(gts)}")
        gt = gts.pop()
        if not gt > 0:
            raise ConfigError(f"rollout group {sample_id!r}: gt_value must be positive")

        rewards, parsed_rows = [], []
        for line, row in rows:
            text = str(_rollout_field(row, line, "text", "response", "completion"))
            task = TaskKind(row.get("task", TaskKind.DISTANCE.value))
            variant = PromptVariant(row.get("variant", PromptVariant.MARKER_GRPO.value))
            try:
                parsed = parse_answer(text, variant, task, table)
            except ParseError as e:
                parsed = e
            rewards.append(grpo_reward(grpo, parsed, gt))
            parsed_rows.append((parsed, text))

        advantages = group_advantages(rewards, grpo.group_size)
        for i, ((parsed, text), reward, advantage) in enumerate(zip(parsed_rows, rewards, advantages)):
            failed = isinstance(parsed, ParseError)
            format_ok = check_format(text)
            results.append({
                "sample_id": sample_id,
                "index": i,
                "reward": reward,
                "advantage": advantage,
                "pred": None if failed else parsed.value,
                "parse_status": parsed.reason if failed else ParseStatus.OK.value,
                "format_ok": format_ok,
                "flagged": failed or (grpo.format_required and not format_ok),
            })

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        for result in results:
            f.write(dumps_record(result) + "\n")
    flagged = sum(1 for r in results if r["flagged"])
    logger.info(f"Scored {len(results)} rollouts in {len(groups)} groups ({flagged} flagged) -> {out_path}")
    return results


# pointcloud
# ----------

def _marked_image(image: Image.Image, p: Pixel, marker: MarkerSpec) -> List[Image.Image]:
    return [render_marker(image, p, marker)]


def _pointcloud_source(cfg: PipelineConfig, manifest: Optional[PathLike], entry_id: Optional[str],
                       image_path: Optional[PathLike],
                       intrinsics: Optional[Intrinsics]) -> Tuple[str, Image.Image, Intrinsics, Optional[Frame]]:
    if manifest is not None:
        index = load_manifest(manifest)
        if entry_id is None:
            if len(index) != 1:
                raise ConfigError("pick a manifest entry with --entry")
            entry_id = index.entries[0].id
        entry = index.by_id.get(entry_id)
        if entry is None:
            raise ConfigError(f"manifest has no entry {entry_id!r}")
        frame = load_frame(index, entry, cfg.max_depth)
        return entry.id, frame.image, frame.intrinsics, frame
    if image_path is None or intrinsics is None:
        raise ConfigError("pointcloud needs --manifest (and --entry) or --image with --intrinsics")
    path = Path(image_path)
    if not path.is_file():
        raise ConfigError(f"image not found: {path}")
    with Image.open(path) as img:
        image = img.convert("RGB")
    return path.stem, image, intrinsics, None


async def run_pointcloud(cfg: PipelineConfig, out_dir: PathLike, manifest: Optional[PathLike] = None,
                         entry_id: Optional[str] = None, image_path: Optional[PathLike] = None,
                         intrinsics: Optional[Intrinsics] = None, n: Optional[int] = None,
                         answerer: Any = None) -> PointCloud:
    """Query a distance at every grid pixel, back-project, write ``pointcloud.ply``.

    Answers go to ``queries.jsonl`` as they arrive; a rerun skips pixels
    already there. Any transport failure stops the run before the PLY is
    written.
    """
    out_dir = Path(out_dir)
    table = cfg.templates()
    variant = cfg.prompt.variant
    source_id, image, k, frame = _pointcloud_source(cfg, manifest, entry_id, image_path, intrinsics)
    if answerer is None and cfg.require_answer_source() == "oracle" and frame is None:
        raise ConfigError("the oracle answers from ground truth; point cloud needs a manifest entry with depth")
    write_resolved_config(cfg, out_dir)

    pixels = grid_pixels(ImageDims.of(image), n or cfg.pointcloud.grid)
    augment = cfg.augment.model_copy(update={"crop_enabled": False})
    rng = np.random.default_rng(derive_seed(cfg.seed, f"pointcloud:{source_id}"))
    augmented = apply_augment(image, k, [], augment, rng, crop=False)
    log = QueryLog(out_dir / "queries.jsonl")

    queries: List[Tuple[int, Pixel, ModelQuery]] = []
    for i, p in enumerate(pixels):
        if i in log:
            continue
        gt = math.nan
        if frame is not None:
            if not frame.is_valid(p):
                log.append(i, p, "", None, "no_depth")
                continue
            gt = euclid_from_principal(p, frame.depth_at(p), k)
        q = transform_pixel(p, augmented.transform)
        if not q.inside(augmented.image.width, augmented.image.height):
            log.append(i, p, "", None, "out_of_bounds")
            continue
        context = PromptContext(width=augmented.image.width, height=augmented.image.height, pixels=[q],
                                intrinsics=augmented.intrinsics)
        source = (functools.partial(_marked_image, augmented.image, q, cfg.marker) if variant.uses_markers
                  else functools.partial(list, [augmented.image]))
        queries.append((i, p, ModelQuery(
            sample_id=f"{source_id}-px{i}",
            task=TaskKind.DISTANCE,
            variant=variant,
            dataset=frame.dataset if frame is not None else "",
            prompt=build_question(TaskKind.DISTANCE, variant, context, table),
            gt_value=gt,
            image_source=source,
        )))
    logger.info(f"Point cloud {source_id}: {len(pixels)} grid pixels, {len(queries)} still to query")

    async with _answerer_or(cfg, table, answerer) as active:
        size = max(1, cfg.pointcloud.batch_size)
        for start in range(0, len(queries), size):
            chunk = queries[start:start + size]
            outcomes = await run_queries(active, [q for _, _, q in chunk], description="pointcloud")
            failed = [o for o in outcomes if o.transport_failed]
            for (i, p, _), outcome in zip(chunk, outcomes):
                if outcome.transport_failed:
                    continue
                parsed = _parse_outcome(outcome, table)
                if isinstance(parsed, ParseError):
                    log.append(i, p, outcome.text or "", None, parsed.reason)
                else:
                    log.append(i, p, outcome.text or "", parsed.value, ParseStatus.OK.value)
            if failed:
                raise TransportError(
                    f"{len(failed)} point-cloud queries failed in transport; rerun to resume from {log.path}",
                    last_status=getattr(failed[0].error, "last_status", None),
                )

    cloud = assemble(image, k, pixels, [log.value(i) for i in range(len(pixels))])
    if cfg.pointcloud.depth_colors:
        cloud.colors = depth_colors(cloud)
    write_ply(cloud, out_dir / "pointcloud.ply")
    stats = summarize(cloud)
    stats["grid"] = len(pixels)
    (out_dir / "summary.json").write_text(dumps_record(stats) + "\n", encoding="utf-8")
    logger.info(f"Point cloud {source_id}: {stats['points']} points, {stats['failures']} failures, "
                f"median depth {stats['median_depth_m']:.2f} m")
    return cloud


@asynccontextmanager
async def _answerer_or(cfg: PipelineConfig, table: TemplateTable, answerer: Any) -> AsyncIterator[Any]:
    if answerer is not None:
        yield answerer
        return
    async with open_answerer(cfg, table) as active:
        yield active


# render
# ------

def run_render(cfg: PipelineConfig, image_path: PathLike, pixels: Sequence[Pixel], out_path: PathLike,
               labels: Optional[Sequence[str]] = None) -> Path:
    """Draw ``cfg.marker`` at each pixel of the original image and save a PNG."""
    path = Path(image_path)
    if not path.is_file():
        raise ConfigError(f"image not found: {path}")
    if not pixels:
        raise ConfigError("render needs at least one pixel")
    with Image.open(path) as img:
        image = img.convert("RGB")
    try:
        if len(pixels) == 1 and not labels:
            rendered = render_marker(image, pixels[0], cfg.marker)
        else:
            if labels:
                if len(labels) != len(pixels):
                    raise ConfigError(f"{len(labels)} labels for {len(pixels)} pixels")
                try:
                    specs = [MarkerSpec.model_validate({**cfg.marker.model_dump(), "label": label}) for label in labels]
                except ValidationError as e:
                    raise ConfigError(f"invalid marker label: {e.errors()[0]['msg']}") from e
            else:
                specs = labelled_specs(cfg.marker, len(pixels))
            rendered = render_multi(image, list(zip(pixels, specs)))
    except OutOfBoundsError as e:
        raise ConfigError(str(e)) from e
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rendered.save(out_path, format="PNG")
    logger.info(f"Rendered {len(pixels)} {cfg.marker.style.value} marker(s) to {out_path}")
    return out_path
