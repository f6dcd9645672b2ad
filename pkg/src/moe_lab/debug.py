import os
import csv
from datetime import datetime
from pathlib import Path

from .config import get_run_id, is_logging_enabled

_log_dir = None
_run_timestamp = None


def _get_run_timestamp() -> str:
    global _run_timestamp
    if _run_timestamp is None:
        # RUN_ID may end in -YYYYMMDD-HHMMSS; reuse that stamp when present
        parts = get_run_id().rsplit("-", 2)
        if len(parts) >= 2 and len(parts[-2]) == 8 and len(parts[-1]) == 6:
            _run_timestamp = f"{parts[-2]}-{parts[-1]}"
        else:
            _run_timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return _run_timestamp


def get_log_dir() -> Path:
    global _log_dir
    if _log_dir is None:
        if os.environ.get("LOG_DIR"):
            _log_dir = Path(os.environ["LOG_DIR"])
        else:
            _log_dir = Path("logs") / _get_run_timestamp()
        _log_dir.mkdir(parents=True, exist_ok=True)
    return _log_dir


def _append_csv(filename: str, row: dict, fieldnames: list):
    if not is_logging_enabled():
        return
    filepath = get_log_dir() / filename
    file_exists = filepath.exists()
    with open(filepath, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        if not file_exists:
            writer.writeheader()
        writer.writerow(row)


def log_run_start(command: str = ""):
    _append_csv("runs.csv", {
        "timestamp": datetime.now().isoformat(),
        "run_id": get_run_id(),
        "event": "start",
        "command": command,
        "status": "",
        "error": "",
    }, ["timestamp", "run_id", "event", "command", "status", "error"])


def log_run_end(command: str = "", status: str = "completed", error=None):
    _append_csv("runs.csv", {
        "timestamp": datetime.now().isoformat(),
        "run_id": get_run_id(),
        "event": "end",
        "command": command,
        "status": status,
        "error": str(error) if error else "",
    }, ["timestamp", "run_id", "event", "command", "status", "error"])


def log_artifact(name: str, kind: str, size_bytes: int):
    _append_csv("artifacts.csv", {
        "timestamp": datetime.now().isoformat(),
        "run_id": get_run_id(),
        "artifact": name,
        "kind": kind,
        "size_bytes": size_bytes,
    }, ["timestamp", "run_id", "artifact", "kind", "size_bytes"])


def log_routing(run: str, step: int, layer: int, dropped_fraction: float, max_load: int, balance_loss: float):
    """One row per MoE layer per evaluation."""
    _append_csv("routing.csv", {
        "timestamp": datetime.now().isoformat(),
        "run_id": get_run_id(),
        "run": run,
        "step": step,
        "layer": layer,
        "dropped_fraction": dropped_fraction,
        "max_load": max_load,
        "balance_loss": balance_loss,
    }, ["timestamp", "run_id", "run", "step", "layer", "dropped_fraction", "max_load", "balance_loss"])
