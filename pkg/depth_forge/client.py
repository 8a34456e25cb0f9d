"""
Inference client for an OpenAI-compatible chat-completions endpoint, plus
offline answerers (mock oracle and constant predictor) that share its
interface.
"""

import asyncio
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Tuple, Union

import aiohttp
import numpy as np
from aiohttp import ClientSession, ClientTimeout
from PIL import Image
from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from depth_forge import config, settings
from depth_forge.errors import ProtocolError, TransportError
from depth_forge.prompts import REFUSAL_TEXT, TemplateTable, build_answer, default_templates
from depth_forge.schemas import PromptVariant, TaskKind
from depth_forge.utils import derive_seed, dumps_record, encode_png_base64, image_to_png_bytes, round_decimal

logger = logging.getLogger(__name__)

TRANSIENT_STATUSES = (429,)


class EndpointConfig(BaseModel):
    base_url: str = config.DEPTHLM_BASE_URL
    # Read from DEPTHLM_API_KEY; never serialized.
    api_key: Optional[str] = Field(default_factory=lambda: config.DEPTHLM_API_KEY, exclude=True, repr=False)
    model_name: str = config.DEPTHLM_MODEL
    max_concurrency: int = settings.ENDPOINT_MAX_CONCURRENCY
    request_timeout: float = settings.ENDPOINT_REQUEST_TIMEOUT_S
    max_retries: int = settings.ENDPOINT_MAX_RETRIES
    temperature: float = settings.ENDPOINT_TEMPERATURE
    max_tokens: Optional[int] = None
    backoff_base: float = settings.BACKOFF_BASE_S
    backoff_factor: float = settings.BACKOFF_FACTOR
    backoff_jitter: float = settings.BACKOFF_JITTER
    audit_log: Optional[str] = None

    @field_validator("max_concurrency")
    @classmethod
    def _concurrency(cls, v: int) -> int:
        if v < 1:
            raise ValueError("max_concurrency must be >= 1")
        return v

    @field_validator("request_timeout")
    @classmethod
    def _timeout(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("request_timeout must be positive")
        return v

    @field_validator("max_retries")
    @classmethod
    def _retries(cls, v: int) -> int:
        if v < 0:
            raise ValueError("max_retries must be >= 0")
        return v

    @property
    def completions_url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


class OracleConfig(BaseModel):
    noise_sigma: float = 0.0
    refusal_rate: float = 0.0
    # None: the pipeline seed is used.
    seed: Optional[int] = None

    @field_validator("noise_sigma")
    @classmethod
    def _sigma(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError("noise_sigma must be >= 0")
        return v

    @field_validator("refusal_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("refusal_rate must be in [0, 1]")
        return v


def is_transient(status: int) -> bool:
    return status in TRANSIENT_STATUSES or status >= 500


def _message_text(body: Dict[str, Any]) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise ProtocolError(f"malformed chat-completions response: {e!r}") from e
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise ProtocolError(f"unexpected message content type {type(content).__name__}")
    return content


def _elide_images(payload: Dict[str, Any]) -> Dict[str, Any]:
    messages = []
    for message in payload.get("messages", []):
        parts = []
        for part in message.get("content", []):
            if isinstance(part, dict) and part.get("type") == "image_url":
                url = part["image_url"]["url"]
                parts.append({"type": "image_url", "image_url": {"url": f"<elided {len(url)} chars>"}})
            else:
                parts.append(part)
        messages.append({**message, "content": parts})
    return {**payload, "messages": messages}


class VlmClient:
    """Async chat-completions client with bounded concurrency and retries.

    Use as ``async with VlmClient(cfg) as client``. ``sleep`` is injectable
    so tests can record the backoff schedule instead of waiting it out.
    """

    def __init__(self, cfg: EndpointConfig, sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
                 rng: Optional[random.Random] = None):
        self.cfg = cfg
        self.timeout = ClientTimeout(total=cfg.request_timeout)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._session: Optional[ClientSession] = None
        self._audit = None

    async def __aenter__(self) -> "VlmClient":
        self._semaphore = asyncio.Semaphore(self.cfg.max_concurrency)
        self._session = ClientSession(timeout=self.timeout)
        if self.cfg.audit_log:
            Path(self.cfg.audit_log).parent.mkdir(parents=True, exist_ok=True)
            self._audit = open(self.cfg.audit_log, "a", encoding="utf-8")
        logger.info(f"Endpoint client ready: {self.cfg.completions_url} model={self.cfg.model_name}")
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def close(self) -> None:
        if self._session is not None:
            await self._session.close()
            self._session = None
        if self._audit is not None:
            self._audit.close()
            self._audit = None

    def backoff_delay(self, attempt: int) -> float:
        """Delay before retry ``attempt + 1``: base * factor**attempt plus up to ``jitter`` of that."""
        delay = self.cfg.backoff_base * self.cfg.backoff_factor ** attempt
        return delay * (1.0 + self.cfg.backoff_jitter * self._rng.random())

    def build_payload(self, images_png: Union[bytes, Sequence[bytes]], prompt: str) -> Dict[str, Any]:
        """One user turn: every image as a base64 data URL, then the prompt."""
        if isinstance(images_png, (bytes, bytearray)):
            images_png = [images_png]
        content: List[Dict[str, Any]] = [
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encode_png_base64(png)}"}}
            for png in images_png
        ]
        content.append({"type": "text", "text": prompt})
        payload: Dict[str, Any] = {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": content}],
        }
        if self.cfg.max_tokens is not None:
            payload["max_tokens"] = self.cfg.max_tokens
        return payload

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        return headers

    def _log_audit(self, request_id: Optional[str], payload: Dict[str, Any], status: Optional[int],
                   text: Optional[str]) -> None:
        if self._audit is None:
            return
        entry = {
            "request_id": request_id,
            "time": time.time(),
            "request": _elide_images(payload),
            "status": status,
            "response": text,
        }
        self._audit.write(dumps_record(entry) + "\n")
        self._audit.flush()

    async def query_model(self, image_png: Union[bytes, Sequence[bytes]], prompt: str,
                          request_id: Optional[str] = None) -> str:
        """Assistant text for one image(s) + prompt turn."""
        if self._session is None or self._semaphore is None:
            raise RuntimeError("VlmClient must be used as an async context manager")
        payload = self.build_payload(image_png, prompt)
        last_status: Optional[int] = None
        attempts = self.cfg.max_retries + 1

        async with self._semaphore:
            for attempt in range(attempts):
                try:
                    logger.debug(f"Request {request_id} (attempt {attempt + 1}/{attempts})")
                    async with self._session.post(
                        self.cfg.completions_url, json=payload, headers=self._headers()
                    ) as response:
                        last_status = response.status
                        if 200 <= response.status < 300:
                            text = _message_text(await response.json(content_type=None))
                            self._log_audit(request_id, payload, response.status, text)
                            return text
                        detail = (await response.text())[:200]
                        self._log_audit(request_id, payload, response.status, detail)
                        if not is_transient(response.status):
                            raise ProtocolError(
                                f"endpoint returned {response.status}: {detail}", last_status=response.status
                            )
                        logger.warning(f"Request {request_id}: transient status {response.status}")
                except asyncio.TimeoutError:
                    logger.warning(f"Request {request_id}: timeout on attempt {attempt + 1}")
                except aiohttp.ClientConnectionError as e:
                    logger.warning(f"Request {request_id}: connection error on attempt {attempt + 1}: {e}")
                except (aiohttp.ContentTypeError, ValueError) as e:
                    raise ProtocolError(f"endpoint returned a non-JSON body: {e}", last_status=last_status) from e

                if attempt < attempts - 1:
                    await self._sleep(self.backoff_delay(attempt))

        logger.error(f"Request {request_id}: giving up after {attempts} attempts (last status {last_status})")
        raise TransportError(f"endpoint unreachable after {attempts} attempts", last_status=last_status)


@dataclass
class ModelQuery:
    """One question put to a model; ``gt_value`` is only visible to the oracle."""

    sample_id: str
    task: TaskKind
    variant: PromptVariant
    dataset: str
    prompt: str
    gt_value: float
    images: Sequence[Image.Image] = ()
    # Renders the images on demand; offline answerers never call it.
    image_source: Optional[Callable[[], List[Image.Image]]] = None
    aux: Dict[str, Any] = field(default_factory=dict)

    @property
    def angles(self) -> Optional[Tuple[float, float]]:
        angles = self.aux.get("ray_angles")
        return tuple(angles) if angles is not None else None

    def load_images(self) -> List[Image.Image]:
        if self.images:
            return list(self.images)
        if self.image_source is None:
            raise ProtocolError(f"query {self.sample_id} has no image")
        return self.image_source()


def noisy_value(gt_value: float, epsilon: float) -> float:
    return gt_value * math.exp(epsilon)


def _answer_text(task: TaskKind, variant: PromptVariant, value: float,
                 angles: Optional[Tuple[float, float]], table: TemplateTable) -> str:
    # Keep the value representable at two decimals.
    if round_decimal(value) <= 0:
        value = 0.01
    if variant == PromptVariant.RAY_THEN_DEPTH and angles is None:
        angles = (0.0, 0.0)
    return build_answer(task, variant, value, angles, table)


def oracle_answer(sample_id: str, task: TaskKind, gt_value: float, cfg: OracleConfig,
                  variant: PromptVariant = PromptVariant.MARKER_PLAIN,
                  angles: Optional[Tuple[float, float]] = None,
                  table: Optional[TemplateTable] = None) -> str:
    """Answer text a model with log-normal error would give; deterministic per seed and sample id."""
    rng = np.random.default_rng(derive_seed(cfg.seed or 0, sample_id))
    if rng.random() < cfg.refusal_rate:
        return REFUSAL_TEXT
    value = gt_value
    if cfg.noise_sigma > 0:
        value = noisy_value(gt_value, float(rng.normal(0.0, cfg.noise_sigma)))
    return _answer_text(TaskKind(task), PromptVariant(variant), value, angles, table or default_templates())


class VlmAnswerer:
    def __init__(self, client: VlmClient):
        self.client = client

    async def answer(self, query: ModelQuery) -> str:
        pngs = [image_to_png_bytes(image) for image in query.load_images()]
        return await self.client.query_model(pngs, query.prompt, request_id=query.sample_id)


class OracleAnswerer:
    def __init__(self, cfg: OracleConfig, table: Optional[TemplateTable] = None):
        self.cfg = cfg
        self.table = table or default_templates()

    async def answer(self, query: ModelQuery) -> str:
        return oracle_answer(query.sample_id, query.task, query.gt_value, self.cfg, query.variant,
                             query.angles, self.table)


class ConstantAnswerer:
    """Always answers ``value`` (e.g. the 2.0 m baseline)."""

    def __init__(self, value: float = settings.CONSTANT_BASELINE_M, table: Optional[TemplateTable] = None):
        self.value = value
        self.table = table or default_templates()

    async def answer(self, query: ModelQuery) -> str:
        return _answer_text(query.task, query.variant, self.value, query.angles, self.table)


@dataclass
class QueryOutcome:
    query: ModelQuery
    text: Optional[str] = None
    error: Optional[Exception] = None

    @property
    def transport_failed(self) -> bool:
        return isinstance(self.error, TransportError)


async def run_queries(answerer: Any, queries: Sequence[ModelQuery], progress: bool = True,
                      description: str = "queries") -> List[QueryOutcome]:
    """Answer every query; transport failures are captured per query, results keep input order.

    Concurrency is bounded by the answerer (the endpoint client's semaphore).
    """
    bar = tqdm(total=len(queries), desc=description, disable=not progress, leave=False)

    async def one(query: ModelQuery) -> QueryOutcome:
        try:
            return QueryOutcome(query, text=await answerer.answer(query))
        except TransportError as e:
            logger.warning(f"Query {query.sample_id} failed: {e}")
            return QueryOutcome(query, error=e)
        finally:
            bar.update(1)

    try:
        return list(await asyncio.gather(*(one(q) for q in queries)))
    finally:
        bar.close()
