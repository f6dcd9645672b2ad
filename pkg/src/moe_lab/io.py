"""Artifact I/O: JSON reports, checkpoints, metrics CSVs and tables.

Every read and write goes through fsspec (`get_fs(uri)`), so a URI like
`memory://runs/x` works the same as a local path. Writes are recorded in
`tracking` and logged to `artifacts.csv` when debug logging is on.

Checkpoint layout, for a stem `runs/x/checkpoint`:
    checkpoint.bin   every parameter as float64 little-endian, concatenated
                     in sorted-name order
    checkpoint.json  {name: {"offset": int, "shape": [...], "dims": [...]}}
                     with offsets counted in values, keys sorted
"""

import csv
import hashlib
import io
import json
from typing import Any, Optional

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

from . import debug, tracking
from .config import get_fs
from .tensor import Tensor

METRICS_COLUMNS = [
    "step",
    "train_loss",
    "eval_loss",
    "balance_loss",
    "z_loss",
    "dropped_fraction",
    "tokens_seen",
    "wall_seconds_per_step",
]


# =============================================================================
# URI dispatch via fsspec
# =============================================================================

def _write_bytes(uri: str, data: bytes, kind: str) -> None:
    fs = get_fs(uri)
    with fs.open(uri, "wb") as f:
        f.write(data)
    tracking.record_write(uri, kind, len(data))
    debug.log_artifact(uri, kind, len(data))


def _append_bytes(uri: str, data: bytes, kind: str) -> None:
    with get_fs(uri).open(uri, "ab") as f:
        f.write(data)
    tracking.record_write(uri, kind, len(data))
    debug.log_artifact(uri, kind, len(data))


def _read_bytes(uri: str, kind: str = "") -> Optional[bytes]:
    """Bytes at a URI, or None if it does not exist."""
    fs = get_fs(uri)
    try:
        with fs.open(uri, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        return None
    tracking.record_read(uri, kind)
    return data


def exists(uri: str) -> bool:
    return get_fs(uri).exists(uri)


# =============================================================================
# JSON
# =============================================================================

def save_json(data: Any, uri: str) -> None:
    _write_bytes(uri, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode(), "json")


def load_json(uri: str) -> Any:
    data = _read_bytes(uri, "json")
    if data is None:
        raise FileNotFoundError(uri)
    return json.loads(data)


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(params: dict[str, Tensor], stem: str) -> None:
    """Write `<stem>.bin` and its `<stem>.json` sidecar; byte-identical for equal params."""
    index, chunks, offset = {}, [], 0
    for name in sorted(params):
        tensor = params[name]
        values = np.ascontiguousarray(tensor.data, dtype="<f8").ravel()
        index[name] = {"offset": offset, "shape": list(tensor.data.shape), "dims": list(tensor.dims)}
        chunks.append(values.tobytes())
        offset += values.size
    _write_bytes(f"{stem}.bin", b"".join(chunks), "checkpoint")
    save_json(index, f"{stem}.json")


def load_checkpoint(stem: str) -> dict[str, Tensor]:
    index = load_json(f"{stem}.json")
    raw = _read_bytes(f"{stem}.bin", "checkpoint")
    if raw is None:
        raise FileNotFoundError(f"{stem}.bin")
    flat = np.frombuffer(raw, dtype="<f8")
    out = {}
    for name in sorted(index):
        entry = index[name]
        size = int(np.prod(entry["shape"], dtype=np.int64))
        values = flat[entry["offset"] : entry["offset"] + size]
        if values.size != size:
            raise ValueError(f"checkpoint {stem}.bin is truncated at parameter '{name}'")
        out[name] = Tensor.wrap(values.reshape(entry["shape"]).astype(np.float64), tuple(entry["dims"]))
    return out


# =============================================================================
# Metrics and tables
# =============================================================================

def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_metrics_row(uri: str, row: dict) -> None:
    """Append one metrics row, writing the fixed header first when the file is new."""
    missing = [c for c in METRICS_COLUMNS if c not in row]
    if missing:
        raise ValueError(f"metrics row is missing columns: {missing}")
    fs = get_fs(uri)
    new = not fs.exists(uri)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    if new:
        writer.writeheader()
    writer.writerow({c: _format(row[c]) for c in METRICS_COLUMNS})
    (_write_bytes if new else _append_bytes)(uri, buffer.getvalue().encode(), "metrics")


def load_metrics(uri: str) -> pa.Table:
    data = _read_bytes(uri, "metrics")
    if data is None:
        raise FileNotFoundError(uri)
    return pacsv.read_csv(pa.BufferReader(data))


def save_table_csv(df: pd.DataFrame, uri: str) -> None:
    _write_bytes(uri, df.to_csv(index=False, lineterminator="\n").encode(), "table")


def load_table_csv(uri: str) -> pd.DataFrame:
    data = _read_bytes(uri, "table")
    if data is None:
        raise FileNotFoundError(uri)
    return pd.read_csv(io.BytesIO(data))


# =============================================================================
# Hashing
# =============================================================================

def data_hash(table: pa.Table) -> str:
    """Short hash of row count + schema, for spotting changed outputs between runs."""
    h = hashlib.md5()
    h.update(f"{len(table)}".encode())
    h.update(str(table.schema).encode())
    return h.hexdigest()[:16]
