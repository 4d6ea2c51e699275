"""File formats used by the command-line tools.

Tensor files are plain text: a header line ``shape: Q1 Q2 ... QN`` followed
by the mode-0 unfolding written as CSV (``Q1`` rows), columns in the
unfolding order of :mod:`tr2r.tensor`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import fold, unfold

__all__ = [
    "format_tensor",
    "parse_tensor",
    "write_tensor",
    "read_tensor",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_rows_csv",
    "dump_json",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def format_tensor(tensor: np.ndarray) -> str:
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 0:
        tensor = tensor.reshape(1)
    lines = ["shape: " + " ".join(str(s) for s in tensor.shape)]
    for row in unfold(tensor, 0):
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("tensor file must start with a 'shape:' header")
    shape = tuple(int(tok) for tok in lines[0][len("shape:"):].split())
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    mat = np.array(rows, dtype=float)
    expected = (shape[0], int(np.prod(shape[1:])) if len(shape) > 1 else 1)
    if mat.shape != expected:
        raise ValueError(f"tensor body has shape {mat.shape}, header implies {expected}")
    return fold(mat, 0, shape)


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    Path(path).write_text(format_tensor(tensor))


def read_tensor(path: str | Path) -> np.ndarray:
    return parse_tensor(Path(path).read_text())


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([_fmt(v) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=float)


def _cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isinf(value):
            return "INF" if value > 0 else "-INF"
        return repr(value)
    if isinstance(value, (np.floating,)):
        return _cell(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a CSV with a header; floats are written with full precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "INF" if v > 0 else "-INF"
        if math.isnan(v):
            return "NaN"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
