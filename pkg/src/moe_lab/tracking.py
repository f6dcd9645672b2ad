"""Which experiment node read or wrote which artifact.

The orchestrator sets the current task before running a node; io functions
record every artifact they touch. A forked node ships its records back as a
snapshot, which the supervisor merges so run.json lists each node's outputs.
"""

from contextvars import ContextVar
from dataclasses import asdict, dataclass
import threading

_current_task_id: ContextVar[str | None] = ContextVar("current_task_id", default=None)


@dataclass
class ArtifactRecord:
    path: str
    task_id: str | None
    operation: str  # "read" or "write"
    kind: str = ""
    size_bytes: int = 0


_records: list[ArtifactRecord] = []
_lock = threading.RLock()


def set_current_task(task_id: str | None):
    _current_task_id.set(task_id)


def get_current_task() -> str | None:
    return _current_task_id.get()


def record_write(path: str, kind: str = "", size_bytes: int = 0):
    with _lock:
        _records.append(ArtifactRecord(path, _current_task_id.get(), "write", kind, size_bytes))


def record_read(path: str, kind: str = ""):
    with _lock:
        _records.append(ArtifactRecord(path, _current_task_id.get(), "read", kind))


def writes_by_task(task_id: str) -> list[str]:
    with _lock:
        return list(dict.fromkeys(r.path for r in _records if r.task_id == task_id and r.operation == "write"))


def reads_by_task(task_id: str) -> list[str]:
    with _lock:
        return list(dict.fromkeys(r.path for r in _records if r.task_id == task_id and r.operation == "read"))


def records(task_id: str | None = None) -> list[dict]:
    with _lock:
        selected = [r for r in _records if task_id is None or r.task_id == task_id]
    return [asdict(r) for r in selected]


def snapshot() -> list[dict]:
    """Picklable copy of every record, for sending across a process boundary."""
    return records()


def merge(snapshot_rows: list[dict]):
    with _lock:
        _records.extend(ArtifactRecord(**row) for row in snapshot_rows)


def clear_tracking():
    with _lock:
        _records.clear()
