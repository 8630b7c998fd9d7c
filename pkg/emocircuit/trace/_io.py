from pathlib import Path

import numpy as np

from emocircuit.exceptions import DataError, ModelConfigError
from emocircuit.model import FAMILIES, ActivationTrace, ModelConfig
from emocircuit.utils.binary import TRACE_MAGIC, decode_container, encode_container, split_payload, write_bytes_atomic


def save_trace(trace: ActivationTrace, path: str | Path) -> Path:
    """
    Export a trace for debugging.

    The file is an ETR1 container: the header carries the model config, the input fingerprint,
    the sequence length and one entry per cell (`family`, `key`, `shape`) in payload order.
    Embedded input rows are stored under the family `embedded`.
    """
    entries = []
    arrays = []
    for position, row in sorted(trace.embedded_rows.items()):
        entries.append({"family": "embedded", "key": [position], "shape": list(row.shape)})
        arrays.append(row)
    for family in FAMILIES:
        for key, value in sorted(trace.cells(family).items()):
            entries.append({"family": family, "key": list(key), "shape": list(value.shape)})
            arrays.append(value)
    header = {
        "config": trace.config.to_dict(),
        "fingerprint": trace.fingerprint,
        "length": trace.length,
        "entries": entries,
    }
    return write_bytes_atomic(path, encode_container(TRACE_MAGIC, header, arrays))


def load_trace(path: str | Path) -> ActivationTrace:
    """
    Raises:
        DataError: If the file is corrupt or its entries are malformed.
    """
    header, payload = decode_container(Path(path).read_bytes(), TRACE_MAGIC)
    try:
        config = ModelConfig.from_dict(header["config"])
        entries = header["entries"]
        shapes = [tuple(int(n) for n in entry["shape"]) for entry in entries]
        fingerprint = str(header["fingerprint"])
        length = int(header["length"])
    except (KeyError, TypeError, ValueError, ModelConfigError) as e:
        raise DataError(f"malformed trace header: {e}") from e
    arrays = split_payload(payload, shapes)
    cells: dict[str, dict[tuple[int, ...], np.ndarray]] = {}
    embedded: dict[int, np.ndarray] = {}
    for entry, array in zip(entries, arrays, strict=True):
        family = entry.get("family")
        key = tuple(int(i) for i in entry.get("key", ()))
        if family == "embedded":
            embedded[key[0]] = array
        elif family in FAMILIES:
            cells.setdefault(family, {})[key] = array
        else:
            raise DataError(f"unknown trace family {family!r}")
    return ActivationTrace(config, fingerprint, length, cells, embedded)
