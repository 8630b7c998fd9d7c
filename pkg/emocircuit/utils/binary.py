"""
Length-prefixed binary containers for matrices.

Layout: 4 magic bytes, a little-endian u32 header length, the header as canonical JSON, the
payload of little-endian float64 values in C order, and a trailing CRC-32 (zlib) of every
preceding byte.
"""

import json
import struct
import zlib
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import DataError
from emocircuit.utils.canonical import canonical_bytes

Array = NDArray[np.float64]

MATRIX_MAGIC = b"EMM1"
TRACE_MAGIC = b"ETR1"
_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


def encode_container(
    magic: bytes, header: Mapping[str, Any], arrays: Iterable[Array], *, versioned: bool = True
) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header_bytes = canonical_bytes(header, versioned=versioned)
    parts = [magic, _U32.pack(len(header_bytes)), header_bytes]
    parts.extend(np.ascontiguousarray(array, dtype=_F64).tobytes() for array in arrays)
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(
    data: bytes, magic: bytes, *, error: type[DataError] = DataError
) -> tuple[dict[str, Any], memoryview]:
    """
    Validate a container and split it into its header and raw payload.

    Raises:
        DataError: (or the given subclass) on a wrong magic, truncation, checksum mismatch or
            unreadable header.
    """
    minimum = len(magic) + 2 * _U32.size
    if len(data) < minimum:
        raise error(f"file too short ({len(data)} bytes)")
    if data[: len(magic)] != magic:
        raise error(f"bad magic {bytes(data[:4])!r}, expected {magic!r}")
    (stored_crc,) = _U32.unpack_from(data, len(data) - _U32.size)
    body = data[: -_U32.size]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise error("checksum mismatch")
    (header_length,) = _U32.unpack_from(body, len(magic))
    header_start = len(magic) + _U32.size
    header_end = header_start + header_length
    if header_end > len(body):
        raise error("header length exceeds file size")
    try:
        header = json.loads(body[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise error(f"unreadable header: {e}") from e
    if not isinstance(header, dict):
        raise error("header must be a JSON object")
    return header, memoryview(body)[header_end:]


def split_payload(
    payload: memoryview, shapes: Sequence[tuple[int, ...]], *, error: type[DataError] = DataError
) -> list[Array]:
    """Cut a payload into float64 arrays of the given shapes; the sizes must match exactly."""
    expected = sum(int(np.prod(shape, dtype=np.int64)) for shape in shapes) * _F64.itemsize
    if len(payload) != expected:
        raise error(f"payload holds {len(payload)} bytes, expected {expected}")
    arrays: list[Array] = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        flat = np.frombuffer(payload, dtype=_F64, count=count, offset=offset)
        arrays.append(flat.astype(np.float64).reshape(shape))
        offset += count * _F64.itemsize
    return arrays


def write_bytes_atomic(path: str | Path, data: bytes) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp_file = target.with_suffix(target.suffix + ".tmp")
    temp_file.write_bytes(data)
    temp_file.replace(target)
    return target


def write_matrix_bundle(
    path: str | Path,
    arrays: Mapping[str, Array],
    meta: Mapping[str, Any] | None = None,
    *,
    magic: bytes = MATRIX_MAGIC,
) -> Path:
    """Write named matrices in insertion order, with optional metadata in the header."""
    entries = [{"name": name, "shape": list(np.shape(array))} for name, array in arrays.items()]
    header = {"entries": entries, "meta": dict(meta or {})}
    return write_bytes_atomic(path, encode_container(magic, header, arrays.values()))


def read_matrix_bundle(
    path: str | Path,
    *,
    magic: bytes = MATRIX_MAGIC,
    error: type[DataError] = DataError,
) -> tuple[dict[str, Array], dict[str, Any]]:
    header, payload = decode_container(Path(path).read_bytes(), magic, error=error)
    entries = header.get("entries")
    if not isinstance(entries, list):
        raise error("header has no entry list")
    try:
        names = [str(entry["name"]) for entry in entries]
        shapes = [tuple(int(n) for n in entry["shape"]) for entry in entries]
    except (KeyError, TypeError, ValueError) as e:
        raise error(f"malformed entry list: {e}") from e
    if len(set(names)) != len(names):
        raise error("duplicate entry names")
    arrays = split_payload(payload, shapes, error=error)
    return dict(zip(names, arrays, strict=True)), dict(header.get("meta") or {})
