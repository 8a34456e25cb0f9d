"""
Depth metrics, GRPO rewards and report aggregation.

Dataset scores are plain means over that dataset's samples; the overall
"Average" is the unweighted mean of the dataset scores. Samples whose answer
could not be parsed count as delta misses and are excluded from the error
(AbsRel / L1 / L2) means.
"""

import csv
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator

from depth_forge import settings
from depth_forge.errors import DomainError, ParseError
from depth_forge.prompts import ParsedAnswer, check_format
from depth_forge.schemas import ParseStatus, TaskKind
from depth_forge.utils import PathLike, dumps_record

logger = logging.getLogger(__name__)

ADVANTAGE_STD_TOLERANCE = 1e-12


class MetricKind(str, Enum):
    DELTA1 = "delta1"
    DELTA2 = "delta2"
    DELTA3 = "delta3"
    ABS_REL = "abs_rel"
    L1 = "l1"
    L2 = "l2"

    @property
    def is_delta(self) -> bool:
        return self in (MetricKind.DELTA1, MetricKind.DELTA2, MetricKind.DELTA3)

    @property
    def delta_power(self) -> int:
        return {MetricKind.DELTA1: 1, MetricKind.DELTA2: 2, MetricKind.DELTA3: 3}[self]


class DeltaMode(str, Enum):
    # max(pred/gt, gt/pred) < 1.25**n
    RATIO = "ratio"
    # |pred - gt| / gt < 1.25**n - 1
    RELATIVE = "relative"


REPORT_METRICS = (
    MetricKind.DELTA1,
    MetricKind.DELTA2,
    MetricKind.DELTA3,
    MetricKind.ABS_REL,
    MetricKind.L1,
    MetricKind.L2,
)


def per_sample_metric(kind: MetricKind, pred: float, gt: float, mode: DeltaMode = DeltaMode.RATIO) -> float:
    kind = MetricKind(kind)
    if not math.isfinite(gt) or gt <= 0:
        raise DomainError(f"ground truth must be positive and finite, got {gt!r}")
    if not math.isfinite(pred):
        raise DomainError(f"prediction must be finite, got {pred!r}")

    if kind.is_delta:
        if pred <= 0:
            return 0.0
        threshold = settings.DELTA1_THRESHOLD ** kind.delta_power
        if DeltaMode(mode) == DeltaMode.RELATIVE:
            return 1.0 if abs(pred - gt) / gt < threshold - 1.0 else 0.0
        return 1.0 if max(pred / gt, gt / pred) < threshold else 0.0
    error = abs(pred - gt)
    if kind == MetricKind.ABS_REL:
        return error / gt
    if kind == MetricKind.L1:
        return error
    return error * error


class GrpoConfig(BaseModel):
    group_size: int = settings.GRPO_GROUP_SIZE
    # KL weight; recorded for the external trainer, never used here.
    beta: float = settings.GRPO_BETA
    reward_kind: MetricKind = MetricKind.L1
    delta_mode: DeltaMode = DeltaMode.RATIO
    format_required: bool = True
    format_fail_reward: float = settings.GRPO_FORMAT_FAIL_REWARD

    @field_validator("group_size")
    @classmethod
    def _group_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("group_size must be >= 2")
        return v


def grpo_reward(cfg: GrpoConfig, parsed: Union[ParsedAnswer, ParseError], gt: float) -> float:
    """Negated error metric (delta kinds: the indicator itself); floor reward on
    parse failure or, when required, a broken think/answer layout."""
    if isinstance(parsed, ParseError):
        return cfg.format_fail_reward
    if cfg.format_required and not check_format(parsed.raw_text):
        return cfg.format_fail_reward
    value = per_sample_metric(cfg.reward_kind, parsed.value, gt, cfg.delta_mode)
    return value if cfg.reward_kind.is_delta else -value


def group_advantages(rewards: Sequence[float], group_size: int) -> List[float]:
    """(r - mean) / population std; a group with no spread gets all zeros."""
    if len(rewards) != group_size:
        raise DomainError(f"expected a group of {group_size} rewards, got {len(rewards)}")
    values = np.asarray(rewards, dtype=np.float64)
    mean = values.mean()
    std = values.std()
    if std <= ADVANTAGE_STD_TOLERANCE * max(1.0, abs(mean)):
        return [0.0] * group_size
    return ((values - mean) / std).tolist()


@dataclass
class SampleRecord:
    sample_id: str
    task: TaskKind
    dataset: str
    gt: float
    pred: Optional[float] = None
    status: ParseStatus = ParseStatus.OK
    ladder: Optional[str] = None
    raw_text: str = ""
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status != ParseStatus.OK

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "task": self.task.value,
            "dataset": self.dataset,
            "gt": self.gt,
            "pred": self.pred,
            "status": self.status.value,
            "ladder": self.ladder,
            "metrics": self.metrics,
            "raw_text": self.raw_text,
        }


def score_sample(sample_id: str, task: TaskKind, dataset: str, gt: float,
                 outcome: Union[ParsedAnswer, ParseError, None], raw_text: str = "",
                 mode: DeltaMode = DeltaMode.RATIO) -> SampleRecord:
    """Per-sample record. ``outcome`` None means the request never got an answer."""
    task = TaskKind(task)
    if outcome is None or isinstance(outcome, ParseError):
        status = ParseStatus.TRANSPORT if outcome is None else ParseStatus(outcome.reason)
        metrics = {k.value: 0.0 for k in REPORT_METRICS if k.is_delta}
        return SampleRecord(sample_id, task, dataset, gt, None, status, None, raw_text, metrics)
    metrics = {k.value: per_sample_metric(k, outcome.value, gt, mode) for k in REPORT_METRICS}
    return SampleRecord(sample_id, task, dataset, gt, outcome.value, ParseStatus.OK, outcome.ladder,
                        outcome.raw_text, metrics)


@dataclass
class GroupSummary:
    count: int
    failures: int
    scores: Dict[str, Optional[float]]

    @property
    def failure_rate(self) -> float:
        return self.failures / self.count if self.count else 0.0


@dataclass
class MetricReport:
    records: List[SampleRecord]
    per_dataset: "OrderedDict[str, GroupSummary]"
    per_task: "OrderedDict[Tuple[str, str], GroupSummary]"
    average: Dict[str, Optional[float]]
    failure_rate: float
    flags: List[str] = field(default_factory=list)

    @property
    def delta1(self) -> float:
        return self.average[MetricKind.DELTA1.value]

    def datasets(self) -> List[str]:
        return list(self.per_dataset)


def _summarize(records: Sequence[SampleRecord]) -> GroupSummary:
    failures = sum(1 for r in records if r.failed)
    scores: Dict[str, Optional[float]] = {}
    for kind in REPORT_METRICS:
        if kind.is_delta:
            values = [r.metrics.get(kind.value, 0.0) for r in records]
        else:
            values = [r.metrics[kind.value] for r in records if not r.failed]
        scores[kind.value] = float(np.mean(values)) if values else None
    return GroupSummary(len(records), failures, scores)


def _mean_of(summaries: Iterable[GroupSummary], key: str) -> Optional[float]:
    values = [s.scores[key] for s in summaries if s.scores[key] is not None]
    return float(np.mean(values)) if values else None


def aggregate(records: Sequence[SampleRecord], flags: Sequence[str] = ()) -> MetricReport:
    if not records:
        raise DomainError("cannot aggregate an empty record set")
    by_dataset: Dict[str, List[SampleRecord]] = defaultdict(list)
    by_task: Dict[Tuple[str, str], List[SampleRecord]] = defaultdict(list)
    for record in records:
        if not record.dataset:
            raise DomainError(f"record {record.sample_id} has no dataset tag")
        by_dataset[record.dataset].append(record)
        by_task[(record.task.value, record.dataset)].append(record)

    per_dataset = OrderedDict((name, _summarize(by_dataset[name])) for name in sorted(by_dataset))
    per_task = OrderedDict((key, _summarize(by_task[key])) for key in sorted(by_task))
    average = {kind.value: _mean_of(per_dataset.values(), kind.value) for kind in REPORT_METRICS}
    failure_rate = sum(1 for r in records if r.failed) / len(records)
    logger.info(
        f"Aggregated {len(records)} samples over {len(per_dataset)} dataset(s): "
        f"average delta1={average['delta1']:.3f}, failure rate={failure_rate:.3f}"
    )
    return MetricReport(list(records), per_dataset, per_task, average, failure_rate, list(flags))


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


def format_table(report: MetricReport, metric: MetricKind = MetricKind.DELTA1) -> str:
    """Aligned text table: datasets as columns, Average last."""
    key = MetricKind(metric).value
    names = report.datasets()
    header = ["Method"] + names + ["Average"]
    row = [key] + [_fmt(report.per_dataset[n].scores[key]) for n in names] + [_fmt(report.average[key])]
    widths = [max(len(h), len(c)) for h, c in zip(header, row)]
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(header, widths)),
        "-+-".join("-" * w for w in widths),
        " | ".join(c.ljust(w) for c, w in zip(row, widths)),
    ]
    if report.flags:
        lines.append(f"flags: {', '.join(report.flags)}")
    return "\n".join(lines) + "\n"


def format_task_table(report: MetricReport, metric: MetricKind = MetricKind.DELTA1) -> str:
    """Tasks as rows, datasets as columns, per-task Average last."""
    key = MetricKind(metric).value
    names = report.datasets()
    tasks = sorted({task for task, _ in report.per_task})
    header = ["Task"] + names + ["Average"]
    rows = []
    for task in tasks:
        cells = [report.per_task.get((task, n)) for n in names]
        present = [c.scores[key] for c in cells if c is not None and c.scores[key] is not None]
        average = float(np.mean(present)) if present else None
        rows.append([task] + [_fmt(c.scores[key]) if c else "-" for c in cells] + [_fmt(average)])
    widths = [max(len(str(x)) for x in column) for column in zip(header, *rows)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)), "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def write_csv(report: MetricReport, path: PathLike) -> None:
    columns = ["dataset", "count", "failures", "failure_rate"] + [k.value for k in REPORT_METRICS]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for name, summary in report.per_dataset.items():
            writer.writerow(
                [name, summary.count, summary.failures, f"{summary.failure_rate:.6f}"]
                + [_csv_value(summary.scores[k.value]) for k in REPORT_METRICS]
            )
        total = len(report.records)
        writer.writerow(
            ["Average", total, sum(s.failures for s in report.per_dataset.values()), f"{report.failure_rate:.6f}"]
            + [_csv_value(report.average[k.value]) for k in REPORT_METRICS]
        )


def _csv_value(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report(report: MetricReport, out_dir: PathLike) -> Dict[str, Path]:
    """metrics.csv, metrics_table.txt, tasks_table.txt and samples.jsonl under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / "metrics.csv",
        "table": out_dir / "metrics_table.txt",
        "tasks": out_dir / "tasks_table.txt",
        "samples": out_dir / "samples.jsonl",
    }
    write_csv(report, paths["csv"])
    paths["table"].write_text(format_table(report), encoding="utf-8")
    paths["tasks"].write_text(format_task_table(report), encoding="utf-8")
    with open(paths["samples"], "w", encoding="utf-8", newline="\n") as f:
        for record in report.records:
            f.write(dumps_record(record.to_dict()) + "\n")
    logger.info(f"Report written to {out_dir}")
    return paths
