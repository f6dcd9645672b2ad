"""Environment settings and typed run configuration.

Paths and switches come from environment variables with local defaults.
Training runs are described by a RunConfig loaded from JSON; every nested
section is a frozen dataclass that validates itself on construction.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import DataConfig
from .model import ModelConfig
from .optim import OptimizerConfig, ScheduleConfig
from .routing import RouterConfig

TIMING_MODES = ("wall", "model")


# =============================================================================
# Environment
# =============================================================================

def get_run_id() -> str:
    return os.environ.get("RUN_ID", "unknown")


def get_data_dir() -> str:
    """Root for generated artifacts; `data/dev` relative to cwd unless DATA_DIR is set."""
    return os.environ.get("DATA_DIR", "data/dev")


def get_runs_dir() -> str:
    return os.environ.get("RUNS_DIR") or str(Path(get_data_dir()) / "runs")


def get_configs_dir() -> str:
    return os.environ.get("CONFIGS_DIR", "configs")


def is_logging_enabled() -> bool:
    return os.environ.get("ENABLE_LOGGING", "").lower() == "true"


_INT_VARS = ("DAG_PARALLELISM",)
_FLAG_VARS = ("ENABLE_LOGGING",)
_CHOICE_VARS = {"DAG_ON_FAILURE": ("crash", "continue")}


def validate_environment() -> None:
    """Raise ValueError naming every environment variable that does not parse."""
    bad = []
    for var in _INT_VARS:
        value = os.environ.get(var)
        if value is not None and not (value.strip().isdigit() and int(value) >= 1):
            bad.append(f"{var}={value!r} (expected a positive integer)")
    for var in _FLAG_VARS:
        value = os.environ.get(var)
        if value is not None and value.lower() not in ("true", "false", ""):
            bad.append(f"{var}={value!r} (expected true or false)")
    for var, choices in _CHOICE_VARS.items():
        value = os.environ.get(var)
        if value is not None and value not in choices:
            bad.append(f"{var}={value!r} (expected one of {', '.join(choices)})")
    if bad:
        raise ValueError(f"Invalid environment variables: {'; '.join(bad)}")


# =============================================================================
# fsspec backend
# =============================================================================

def get_fs(uri: str = ""):
    """fsspec filesystem for a URI.

    Local paths get the local filesystem with auto_mkdir, so parent
    directories appear on first write. Anything with a protocol prefix
    (memory://, s3://, ...) is dispatched to fsspec by protocol.
    """
    import fsspec

    if "://" in uri and not uri.startswith("file://"):
        return fsspec.filesystem(uri.split("://", 1)[0])
    return fsspec.filesystem("file", auto_mkdir=True)


def join_uri(base: str, *parts: str) -> str:
    return "/".join([base.rstrip("/"), *(p.strip("/") for p in parts)])


# =============================================================================
# Run configuration
# =============================================================================

@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_tokens: int = 256
    eval_every: int = 100
    eval_batches: int = 4
    seed: int = 0
    timing: str = "wall"
    out_dir: str | None = None

    def __post_init__(self):
        if self.batch_tokens < 1:
            raise ValueError(f"batch_tokens must be >= 1, got {self.batch_tokens}")
        if self.batch_tokens % self.model.seq_len:
            raise ValueError(
                f"batch_tokens={self.batch_tokens} is not divisible by seq_len={self.model.seq_len}"
            )
        self.model.check_batch(self.batch_tokens)
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_batches < 1:
            raise ValueError(f"eval_batches must be >= 1, got {self.eval_batches}")
        if self.data.vocab != self.model.vocab:
            raise ValueError(f"data.vocab={self.data.vocab} must equal model.vocab={self.model.vocab}")
        if self.timing not in TIMING_MODES:
            raise ValueError(f"timing must be one of {TIMING_MODES}, got '{self.timing}'")

    @property
    def sequences(self) -> int:
        return self.batch_tokens // self.model.seq_len

    @property
    def run_dir(self) -> str:
        return self.out_dir or join_uri(get_runs_dir(), self.name)


_NESTED = {
    RunConfig: {"model": ModelConfig, "optimizer": OptimizerConfig, "schedule": ScheduleConfig, "data": DataConfig},
    ModelConfig: {"router": RouterConfig},
}


def _build(cls: type, values: dict[str, Any], where: str):
    if not isinstance(values, dict):
        raise ValueError(f"{where or 'config'} must be a JSON object, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        nested = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(nested, value, f"{where}.{key}".lstrip(".")) if nested else value
    return cls(**kwargs)


def run_config_from_dict(values: dict[str, Any]) -> RunConfig:
    """Nested dict -> RunConfig; missing keys take defaults, unknown keys raise."""
    return _build(RunConfig, values, "")


def run_config_to_dict(run: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(run)


def load_run_config(path: str) -> RunConfig:
    """Read a RunConfig JSON file; a bare name is looked up in CONFIGS_DIR."""
    uri = path
    if not path.endswith(".json") and "/" not in path:
        uri = join_uri(get_configs_dir(), f"{path}.json")
    fs = get_fs(uri)
    try:
        with fs.open(uri, "r") as f:
            values = json.load(f)
    except FileNotFoundError:
        raise ValueError(f"config file not found: {uri}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {uri} is not valid JSON: {e}") from None
    run = run_config_from_dict(values)
    if "name" not in values:
        run = dataclasses.replace(run, name=Path(uri).stem)
    return run
