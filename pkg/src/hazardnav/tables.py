"""Versioned CSV tables shared by every command that emits results.

Each file starts with a ``# schema_version: N`` line, may carry further
``#`` comment lines, and then holds an ordinary CSV header and rows.
Floats are written with ``repr`` so reading a table back returns the
exact values that were written.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .synth import atomic_write_text

TABLE_SCHEMA_VERSION = 1
_HEADER = f"# schema_version: {TABLE_SCHEMA_VERSION}"


class TableFormatError(ValueError):
    pass


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_table(fields: Sequence[str], rows: Iterable[Mapping], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write(_HEADER + "\n")
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_cell(row[f]) for f in fields])
    return buf.getvalue()


def write_table(path, fields: Sequence[str], rows: Iterable[Mapping], comments: Sequence[str] = ()) -> None:
    atomic_write_text(path, format_table(fields, rows, comments))


def parse_table(text: str, source: str = "<table>") -> list[dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise TableFormatError(f"{source}: missing '{_HEADER}' header")
    body = [ln for ln in lines[1:] if not ln.startswith("#")]
    if not body:
        raise TableFormatError(f"{source}: no column header")
    return list(csv.DictReader(body))


def read_table(path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TableFormatError(f"{path}: cannot read table: {exc}") from exc
    return parse_table(text, str(path))


def as_number(text: str):
    """Inverse of the cell formatting: int where possible, else float."""
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_numeric_table(path, text_fields: Sequence[str] = ()) -> list[dict]:
    out = []
    for row in read_table(path):
        out.append({k: (v if k in text_fields else as_number(v)) for k, v in row.items()})
    return out


def same_value(a, b) -> bool:
    """Equality that treats NaN as equal to NaN."""
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b
