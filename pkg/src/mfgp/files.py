"""CSV and checkpoint formats.

Datasets: header ``x_1,...,x_D,y,fidelity`` with 1-based fidelity labels.
Floats are written with 17 significant digits so every file round-trips
exactly through :func:`read_dataset` / :func:`write_dataset`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import MultiFidelityDataset
from .errors import DigestMismatch, SchemaError

FLOAT_FMT = ".17g"
CHECKPOINT_FORMAT = "mfgp-checkpoint"
CHECKPOINT_VERSION = 1


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), FLOAT_FMT)
    return str(v)


def table_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(table_text(header, rows), encoding="utf-8")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    return parse_table(Path(path).read_text(encoding="utf-8"), path)


def parse_table(text: str, path="<text>") -> tuple[list[str], list[list[str]]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file") from None
    return [h.strip() for h in header], [r for r in reader if r]


def _float(path, row_no, col, value) -> float:
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"{path}: row {row_no}, column {col!r}: not a number: {value!r}") from None


def _x_columns(path, header) -> int:
    d = 0
    while d < len(header) and header[d] == f"x_{d + 1}":
        d += 1
    if d == 0:
        raise SchemaError(f"{path}: header must start with x_1")
    return d


def dataset_text(data: MultiFidelityDataset) -> str:
    if data.d_out != 1:
        raise SchemaError("dataset files hold a single output column")
    header = [f"x_{j + 1}" for j in range(data.d_in)] + ["y", "fidelity"]
    rows = []
    for t, (x, y) in enumerate(zip(data.xs, data.ys), start=1):
        for xi, yi in zip(x, y):
            rows.append([*xi.tolist(), float(yi[0]), t])
    return table_text(header, rows)


def write_dataset(path, data: MultiFidelityDataset) -> None:
    Path(path).write_text(dataset_text(data), encoding="utf-8")


def read_dataset(path) -> MultiFidelityDataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"), path)


def parse_dataset(text: str, path="<text>") -> MultiFidelityDataset:
    header, rows = parse_table(text, path)
    d = _x_columns(path, header)
    if header[d:] != ["y", "fidelity"]:
        raise SchemaError(f"{path}: header must be x_1..x_{d},y,fidelity")
    x = np.empty((len(rows), d))
    y = np.empty(len(rows))
    fid = np.empty(len(rows), dtype=int)
    for i, row in enumerate(rows):
        row_no = i + 2  # 1-based, counting the header
        if len(row) != d + 2:
            raise SchemaError(f"{path}: row {row_no} has {len(row)} fields, expected {d + 2}")
        x[i] = [_float(path, row_no, f"x_{j + 1}", v) for j, v in enumerate(row[:d])]
        y[i] = _float(path, row_no, "y", row[d])
        try:
            fid[i] = int(row[d + 1])
        except ValueError:
            raise SchemaError(f"{path}: row {row_no}: fidelity must be an integer") from None
        if fid[i] < 1:
            raise SchemaError(f"{path}: row {row_no}: fidelity must be >= 1")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    levels = sorted(set(fid.tolist()))
    if levels != list(range(1, levels[-1] + 1)):
        raise SchemaError(f"{path}: fidelity labels {levels} are not contiguous from 1")
    return MultiFidelityDataset.from_stacked(x, y[:, None], fid)


def read_points(path) -> np.ndarray:
    """Input columns ``x_1..x_D`` of any CSV; other columns are ignored."""
    header, rows = read_table(path)
    d = _x_columns(path, header)
    out = np.empty((len(rows), d))
    for i, row in enumerate(rows):
        if len(row) < d:
            raise SchemaError(f"{path}: row {i + 2} has {len(row)} fields, expected >= {d}")
        out[i] = [_float(path, i + 2, f"x_{j + 1}", v) for j, v in enumerate(row[:d])]
    return out


def dataset_digest(data: MultiFidelityDataset) -> str:
    return hashlib.sha256(dataset_text(data).encode("utf-8")).hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def write_checkpoint(path, payload: dict) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_checkpoint(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a JSON checkpoint ({exc})") from None
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint format")
    return payload


def check_digest(payload: dict, data: MultiFidelityDataset) -> None:
    got = dataset_digest(data)
    if got != payload["dataset_digest"]:
        raise DigestMismatch(
            f"dataset digest {got[:12]} does not match checkpoint {payload['dataset_digest'][:12]}")
