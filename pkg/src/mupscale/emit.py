"""Deterministic CSV/JSON writers.

Floats are written with 17 significant digits, which round-trips every
float64 exactly. Column order is fixed by the caller; nothing here depends on
dict iteration order, wall time or the environment.
"""

import csv
import json
import math
import os

from .exceptions import CsvFormatError


def fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if v is None:
        return ""
    if hasattr(v, "item"):  # numpy scalar
        return fmt(v.item())
    return str(v)


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def write_csv(path, columns, rows):
    """Write ``rows`` (dicts) under ``columns``; missing keys become empty cells."""
    _ensure_dir(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def parse_cell(s):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_csv(path):
    """Inverse of ``write_csv``: (columns, rows) with ints/floats restored."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            columns = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file", 1) from None
        rows = []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != len(columns):
                raise CsvFormatError(f"expected {len(columns)} fields, got {len(rec)}", line)
            rows.append({c: parse_cell(v) for c, v in zip(columns, rec)})
    return columns, rows


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return fmt(v)  # JSON has no NaN/inf; keep them as strings
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "tolist"):
        return _jsonable(v.tolist())
    return v


def write_json(path, payload):
    _ensure_dir(path)
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)
