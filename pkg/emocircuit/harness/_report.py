from pathlib import Path
from typing import Any

import pandas as pd

from emocircuit.exceptions import ReportError
from emocircuit.utils.canonical import FLOAT_FORMAT, read_canonical, write_canonical, write_text_atomic


def write_table(frame: pd.DataFrame, path: str | Path) -> Path:
    """CSV with the report float format and `\\n` line endings."""
    text = frame.to_csv(index=False, float_format=f"%{FLOAT_FORMAT}", lineterminator="\n")
    return write_text_atomic(path, text)


def emit_report(results: Any, path: str | Path) -> Path:
    """
    Write `results` as canonical JSON at `path`.

    Objects exposing `to_frame()` also get a CSV table next to the JSON file, under the same
    stem.

    Raises:
        ReportError: If the results hold NaN, infinity or a value that cannot be serialized.
        OSError: If the file cannot be written.
    """
    target = write_canonical(path, results)
    to_frame = getattr(results, "to_frame", None)
    if callable(to_frame):
        write_table(to_frame(), target.with_suffix(".csv"))
    return target


def read_report(path: str | Path) -> dict[str, Any]:
    """
    Raises:
        ReportError: If the file is not a canonical report of the current schema version.
    """
    target = Path(path)
    if not target.exists():
        raise ReportError(f"no report at {target}")
    return read_canonical(target)
