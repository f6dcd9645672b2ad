import json
from pathlib import Path

import numpy as np
import pytest

from moe_lab import debug, tracking
from moe_lab.config import run_config_from_dict
from moe_lab.model import ModelConfig
from moe_lab.routing import RouterConfig

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIGS = REPO_ROOT / "configs"

_ENV_VARS = (
    "DATA_DIR", "RUNS_DIR", "CONFIGS_DIR", "RUN_ID", "LOG_DIR", "ENABLE_LOGGING",
    "DAG_TARGET", "DAG_PARALLELISM", "DAG_ON_FAILURE",
)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    """Every test writes under its own tmp_path and starts with clean logging state."""
    for var in _ENV_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("CONFIGS_DIR", str(CONFIGS))
    monkeypatch.setattr(debug, "_log_dir", None)
    monkeypatch.setattr(debug, "_run_timestamp", None)
    tracking.clear_tracking()
    yield
    tracking.clear_tracking()


@pytest.fixture
def tiny_run_dict() -> dict:
    return json.loads((CONFIGS / "tiny_moe.json").read_text())


@pytest.fixture
def tiny_run(tiny_run_dict, tmp_path):
    values = dict(tiny_run_dict, out_dir=str(tmp_path / "runs" / "tiny_moe"))
    return run_config_from_dict(values)


@pytest.fixture
def toy_moe_config() -> ModelConfig:
    """L=2, M=16, one MoE layer with E=4, K=2: small enough for full finite-difference checks."""
    return ModelConfig(
        layers=2, d_model=16, heads=2, ffn_hidden=16, vocab=16, seq_len=8,
        moe_placement="every-2",
        router=RouterConfig(num_experts=4, top_k=2, capacity_factor=2.0),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
