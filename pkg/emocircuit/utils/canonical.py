import json
import math
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from emocircuit.exceptions import ReportError

SCHEMA_VERSION = 1
FLOAT_FORMAT = ".10g"


def _normalize(value: Any, where: str) -> Any:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        if not math.isfinite(number):
            raise ReportError(f"non-finite value {number!r} at {where}")
        return number
    if isinstance(value, np.ndarray):
        return [_normalize(item, f"{where}[{i}]") for i, item in enumerate(value.tolist())]
    if isinstance(value, Mapping):
        return {str(key): _normalize(item, f"{where}.{key}") for key, item in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [_normalize(item, f"{where}[{i}]") for i, item in enumerate(items)]
    if hasattr(value, "to_dict"):
        return _normalize(value.to_dict(), where)
    raise ReportError(f"cannot serialize {type(value).__name__} at {where}")


def _format_float(number: float) -> str:
    text = format(number, FLOAT_FORMAT)
    if text == "-0":
        text = "0"
    if "e" not in text and "." not in text:
        text += ".0"
    return text


def _emit(value: Any, level: int) -> str:
    pad = "  " * (level + 1)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(key)}: {_emit(value[key], level + 1)}" for key in sorted(value)]
        return "{\n" + ",\n".join(items) + "\n" + "  " * level + "}"
    if isinstance(value, list):
        if not value:
            return "[]"
        return "[\n" + ",\n".join(f"{pad}{_emit(item, level + 1)}" for item in value) + "\n" + "  " * level + "]"
    if isinstance(value, float):
        return _format_float(value)
    return json.dumps(value)


def canonical_dumps(data: Any, *, versioned: bool = True) -> str:
    """
    Serialize `data` as canonical JSON.

    Keys are sorted, floats carry ten significant digits, and the text is indented by two
    spaces and newline-terminated. Mappings gain a top-level `schema_version` unless
    `versioned` is False.

    Raises:
        ReportError: If the data contains NaN, infinity or an unsupported type.
    """
    normalized = _normalize(data, "$")
    if versioned and isinstance(normalized, dict):
        normalized = {"schema_version": SCHEMA_VERSION, **normalized}
    return _emit(normalized, 0) + "\n"


def _emit_line(value: Any) -> str:
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(key)}:{_emit_line(value[key])}" for key in sorted(value)) + "}"
    if isinstance(value, list):
        return "[" + ",".join(_emit_line(item) for item in value) + "]"
    if isinstance(value, float):
        return _format_float(value)
    return json.dumps(value)


def canonical_line(data: Any) -> str:
    """Single-line canonical JSON for JSON-lines logs: sorted keys, no whitespace, no version."""
    return _emit_line(_normalize(data, "$")) + "\n"


def canonical_bytes(data: Any, *, versioned: bool = True) -> bytes:
    return canonical_dumps(data, versioned=versioned).encode("utf-8")


def write_text_atomic(path: str | Path, text: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp_file = target.with_suffix(target.suffix + ".tmp")
    with temp_file.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    temp_file.replace(target)
    return target


def write_canonical(path: str | Path, data: Any) -> Path:
    return write_text_atomic(path, canonical_dumps(data))


def read_canonical(path: str | Path) -> dict[str, Any]:
    try:
        with Path(path).open(encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as e:
        raise ReportError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ReportError(f"{path} must contain a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ReportError(f"{path} has schema_version {version!r}, expected {SCHEMA_VERSION}")
    return data
