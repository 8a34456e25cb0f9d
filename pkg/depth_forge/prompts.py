"""
Question and answer texts for every task and prompt variant, and the parser
that turns model output back into a number.

Templates live in ``resources/prompt_templates.json`` and can be swapped for
another file without code changes. The parser tries, in order: a strict match
of the answer template, the last ``<answer>`` block (GRPO outputs), the number
nearest to the left of the unit word, and finally the last number in the text.
The ladder rung that produced the value is recorded on the result.
"""

import json
import logging
import math
import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, PrivateAttr, ValidationError, model_validator

from depth_forge import settings
from depth_forge.errors import ConfigError, DomainError, ParseError
from depth_forge.geometry import Intrinsics, Pixel
from depth_forge.schemas import PromptVariant, TaskKind
from depth_forge.utils import PathLike, format_compact, format_fixed, round_decimal

logger = logging.getLogger(__name__)

NUMBER_PATTERN = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_NUMBER_RE = re.compile(r"(?<![\w.])" + NUMBER_PATTERN)
_ANSWER_BLOCK_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_FORMAT_RE = re.compile(r"^\s*<think>(?:(?!<think>|</think>).)*</think>\s*,?\s*"
                        r"<answer>(?:(?!<answer>|</answer>).)*</answer>\s*$", re.DOTALL)
_RAY_RE = re.compile(
    r"(" + NUMBER_PATTERN + r")\s*degrees\s+to\s+the\s+(right|left),?\s*"
    r"(" + NUMBER_PATTERN + r")\s*degrees\s+(above|below)",
    re.IGNORECASE,
)

LADDER_STRICT = "strict"
LADDER_ANSWER_TAG = "answer_tag"
LADDER_UNIT = "unit"
LADDER_LAST_NUMBER = "last_number"

REFUSAL_TEXT = "I cannot tell."

_DISTANCE_LIKE = (TaskKind.DISTANCE, TaskKind.PRINCIPAL_AXIS_DISTANCE)


class TaskTemplates(BaseModel):
    reconstructed: bool = False
    unit_word: str
    unit_token: str
    question: Dict[str, str]
    answer: str
    think: str
    ray_answer: Optional[str] = None

    @model_validator(mode="after")
    def _has_default_question(self) -> "TaskTemplates":
        if PromptVariant.MARKER_PLAIN.value not in self.question:
            raise ValueError("every task needs a marker_plain question")
        unknown = set(self.question) - {v.value for v in PromptVariant}
        if unknown:
            raise ValueError(f"unknown prompt variants {sorted(unknown)}")
        return self


class TemplateTable(BaseModel):
    schema_version: str
    templates_version: str
    grpo_suffix: str
    grpo_answer: str
    tasks: Dict[TaskKind, TaskTemplates]

    _patterns: Dict[tuple, tuple] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _covers_every_task(self) -> "TemplateTable":
        if self.schema_version != settings.SCHEMA_VERSION:
            raise ValueError(f"unsupported template schema_version {self.schema_version!r}")
        missing = [t.value for t in TaskKind if t not in self.tasks]
        if missing:
            raise ValueError(f"templates missing for tasks {missing}")
        return self

    def for_task(self, task: TaskKind) -> TaskTemplates:
        return self.tasks[TaskKind(task)]

    def strict_patterns(self, task: TaskKind, variant: PromptVariant) -> Tuple["re.Pattern", ...]:
        key = (task, variant)
        if key not in self._patterns:
            templates = self.for_task(task)
            if variant == PromptVariant.MARKER_GRPO:
                candidates = [self.grpo_answer]
            else:
                candidates = [t for t in (templates.ray_answer, templates.answer) if t]
            self._patterns[key] = tuple(_template_regex(t) for t in candidates)
        return self._patterns[key]


def _parse_table(raw: str, origin: str) -> TemplateTable:
    try:
        table = TemplateTable.model_validate(json.loads(raw))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid prompt template table {origin}: {e}") from e
    logger.debug(f"Loaded prompt templates {table.templates_version} from {origin}")
    return table


@lru_cache(maxsize=1)
def default_templates() -> TemplateTable:
    raw = resources.files("depth_forge").joinpath("resources/prompt_templates.json").read_text(encoding="utf-8")
    return _parse_table(raw, "<bundled>")


def load_templates(path: Optional[PathLike] = None) -> TemplateTable:
    """The bundled table, or the one at ``path`` when given."""
    if path is None:
        return default_templates()
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read prompt templates {path}: {e}") from e
    return _parse_table(raw, str(path))


@dataclass
class PromptContext:
    """Everything a question template may refer to."""

    width: Optional[int] = None
    height: Optional[int] = None
    pixels: Sequence[Pixel] = ()
    intrinsics: Optional[Intrinsics] = None
    given_time: Optional[float] = None
    given_speed: Optional[float] = None

    def fields(self) -> Dict[str, str]:
        values: Dict[str, str] = {}
        if self.width is not None:
            values["width"] = str(int(self.width))
        if self.height is not None:
            values["height"] = str(int(self.height))
        if self.pixels:
            values["u"] = format_compact(self.pixels[0].u)
            values["v"] = format_compact(self.pixels[0].v)
            for i, p in enumerate(self.pixels, start=1):
                values[f"u{i}"] = format_compact(p.u)
                values[f"v{i}"] = format_compact(p.v)
        if self.intrinsics is not None:
            for name, value in self.intrinsics.to_dict().items():
                values[name] = format_compact(value)
        if self.given_time is not None:
            values["given_time"] = format_compact(self.given_time)
        if self.given_speed is not None:
            values["given_speed"] = format_compact(self.given_speed)
        return values


def _placeholders(template: str) -> List[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def _question_template(templates: TaskTemplates, variant: PromptVariant) -> str:
    key = variant.value if variant != PromptVariant.RAY_THEN_DEPTH else PromptVariant.MARKER_PLAIN.value
    return templates.question.get(key, templates.question[PromptVariant.MARKER_PLAIN.value])


def build_question(task: TaskKind, variant: PromptVariant, context: Optional[PromptContext] = None,
                   table: Optional[TemplateTable] = None) -> str:
    table = table or default_templates()
    task, variant = TaskKind(task), PromptVariant(variant)
    templates = table.for_task(task)
    if variant == PromptVariant.RAY_THEN_DEPTH and task not in _DISTANCE_LIKE:
        raise ConfigError(f"prompt variant {variant.value} only applies to distance tasks, not {task.value}")

    template = _question_template(templates, variant)
    values = (context or PromptContext()).fields()
    missing = [name for name in _placeholders(template) if name not in values]
    if missing:
        raise ConfigError(f"{task.value}/{variant.value} question needs metadata {missing}")
    question = template.format(**values)
    if variant == PromptVariant.MARKER_GRPO:
        question += table.grpo_suffix.format(unit_word=templates.unit_word)
    return question


def _check_value(value: float) -> str:
    if not math.isfinite(value) or value <= 0:
        raise DomainError(f"answer value must be positive and finite, got {value!r}")
    text = format_fixed(value)
    if round_decimal(value) <= 0:
        raise DomainError(f"answer value {value!r} rounds to zero at two decimals")
    return text


def build_answer(task: TaskKind, variant: PromptVariant, value: float,
                 angles: Optional[Tuple[float, float]] = None,
                 table: Optional[TemplateTable] = None) -> str:
    """Target text for ``value``, rounded half away from zero to 2 decimals."""
    table = table or default_templates()
    task, variant = TaskKind(task), PromptVariant(variant)
    templates = table.for_task(task)
    text = _check_value(value)

    if variant == PromptVariant.MARKER_GRPO:
        think = templates.think.format(value=text)
        return table.grpo_answer.format(think=think, value=text)

    if variant == PromptVariant.RAY_THEN_DEPTH:
        if templates.ray_answer is None:
            raise ConfigError(f"prompt variant {variant.value} only applies to distance tasks, not {task.value}")
        if angles is None:
            raise ConfigError("ray_then_depth answers need (horizontal, vertical) angles")
        horizontal, vertical = angles
        if not (math.isfinite(horizontal) and math.isfinite(vertical)):
            raise DomainError(f"ray angles must be finite, got {angles!r}")
        return templates.ray_answer.format(
            horizontal=format_fixed(abs(horizontal)),
            h_side="right" if horizontal >= 0 else "left",
            vertical=format_fixed(abs(vertical)),
            v_side="above" if vertical >= 0 else "below",
            value=text,
        )

    return templates.answer.format(value=text)


@dataclass
class ParsedAnswer:
    value: float
    raw_text: str
    ladder: str = LADDER_STRICT
    extras: Optional[Tuple[float, float]] = None


def _template_regex(template: str) -> "re.Pattern":
    parts = []
    for literal, name, _, _ in string.Formatter().parse(template):
        parts.append(r"\s+".join(re.escape(chunk) for chunk in literal.split(" ")))
        if name == "value":
            parts.append(r"(?P<value>" + NUMBER_PATTERN + r")")
        elif name in ("h_side", "v_side"):
            parts.append(r"\w+")
        elif name == "think":
            parts.append(r".*?")
        elif name:
            parts.append(NUMBER_PATTERN)
    return re.compile(r"^\s*" + "".join(parts) + r"\s*$", re.DOTALL | re.IGNORECASE)


def _to_value(token: str, text: str) -> float:
    value = float(token)
    if not math.isfinite(value) or value <= 0:
        raise ParseError(ParseError.DOMAIN, text)
    return value


def _unit_number(text: str, unit_token: str) -> Optional[str]:
    """Number closest to the left of the last unit word that has one."""
    stem = re.escape(unit_token[:-1] if unit_token.endswith("s") else unit_token)
    unit_re = re.compile(r"\b" + stem + r"s?\b", re.IGNORECASE)
    best = None
    for match in unit_re.finditer(text):
        numbers = list(_NUMBER_RE.finditer(text, 0, match.start()))
        if numbers:
            best = numbers[-1].group(0)
    return best


def _ray_extras(text: str) -> Optional[Tuple[float, float]]:
    match = _RAY_RE.search(text)
    if not match:
        return None
    horizontal = float(match.group(1)) * (1 if match.group(2).lower() == "right" else -1)
    vertical = float(match.group(3)) * (1 if match.group(4).lower() == "above" else -1)
    return horizontal, vertical


def parse_answer(text: str, variant: PromptVariant, task: TaskKind = TaskKind.DISTANCE,
                 table: Optional[TemplateTable] = None) -> ParsedAnswer:
    """Extract the numeric answer from model output.

    Raises ParseError with reason ``no_number``, ``ambiguous`` or ``domain``.
    """
    table = table or default_templates()
    task, variant = TaskKind(task), PromptVariant(variant)
    text = text or ""
    extras = _ray_extras(text) if variant == PromptVariant.RAY_THEN_DEPTH else None

    for pattern in table.strict_patterns(task, variant):
        match = pattern.match(text)
        if match:
            return ParsedAnswer(_to_value(match.group("value"), text), text, LADDER_STRICT, extras)

    blocks = _ANSWER_BLOCK_RE.findall(text)
    if blocks:
        numbers = _NUMBER_RE.findall(blocks[-1])
        if not numbers:
            raise ParseError(ParseError.NO_NUMBER, text)
        if len(numbers) > 1:
            raise ParseError(ParseError.AMBIGUOUS, text)
        return ParsedAnswer(_to_value(numbers[0], text), text, LADDER_ANSWER_TAG, extras)

    token = _unit_number(text, table.for_task(task).unit_token)
    if token is not None:
        return ParsedAnswer(_to_value(token, text), text, LADDER_UNIT, extras)

    numbers = _NUMBER_RE.findall(text)
    if numbers:
        logger.debug(f"Falling back to the last number in {text[:60]!r}")
        return ParsedAnswer(_to_value(numbers[-1], text), text, LADDER_LAST_NUMBER, extras)
    raise ParseError(ParseError.NO_NUMBER, text)


def check_format(text: str) -> bool:
    """True when ``text`` is exactly one think block followed by one answer block."""
    return bool(_FORMAT_RE.match(text or ""))
