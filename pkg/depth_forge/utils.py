import base64
import hashlib
import io
import json
import logging
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Union

from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def derive_seed(global_seed: int, sample_id: str) -> int:
    """Per-sample seed: the global seed XOR a stable 64-bit hash of the sample id."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return (int(global_seed) ^ int.from_bytes(digest[:8], "little")) & 0xFFFFFFFFFFFFFFFF


def round_decimal(value: float, places: int = 2) -> Decimal:
    """Round half away from zero on the shortest decimal repr of ``value``."""
    quantum = Decimal(1).scaleb(-places)
    return Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP)


def round2(value: float) -> float:
    return float(round_decimal(value, 2))


def format_fixed(value: float, places: int = 2) -> str:
    """Fixed-point text with exactly ``places`` decimals, e.g. 2.0 -> '2.00'."""
    return str(round_decimal(value, places))


def format_compact(value: float) -> str:
    """Integers without a decimal point, everything else rounded to 2 decimals
    with trailing zeros stripped (used for coordinates and intrinsics)."""
    rounded = round_decimal(value, 2)
    if rounded == rounded.to_integral_value():
        return str(int(rounded))
    return format(rounded.normalize(), "f")


def image_to_png_bytes(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return buffer.getvalue()


def encode_png_base64(image_png: bytes) -> str:
    """Base64 text for embedding a PNG in a data URL."""
    encoded = base64.b64encode(image_png).decode("utf-8")
    logger.debug(f"Encoded image: {len(image_png)} bytes -> {len(encoded)} chars")
    return encoded


def dumps_record(record: Dict[str, Any]) -> str:
    """One JSONL line. Field order is the insertion order of ``record``."""
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps_record(record))
            f.write("\n")
            count += 1
    return count


def iter_jsonl(path: PathLike) -> Iterator[tuple]:
    """Yield ``(line_number, obj)`` for every non-blank line."""
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            yield line_number, json.loads(line)


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    return [obj for _, obj in iter_jsonl(path)]
