import json

import pytest

from conftest import CONFIGS
from moe_lab.config import (
    get_configs_dir,
    get_data_dir,
    get_fs,
    get_runs_dir,
    join_uri,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
    validate_environment,
)


def test_environment_defaults(monkeypatch):
    monkeypatch.delenv("DATA_DIR")
    monkeypatch.delenv("CONFIGS_DIR")
    assert get_data_dir() == "data/dev"
    assert get_runs_dir() == "data/dev/runs"
    assert get_configs_dir() == "configs"


def test_runs_dir_override(monkeypatch):
    monkeypatch.setenv("RUNS_DIR", "memory://runs")
    assert get_runs_dir() == "memory://runs"


def test_validate_environment_accepts_valid_values(monkeypatch):
    monkeypatch.setenv("DAG_PARALLELISM", "4")
    monkeypatch.setenv("ENABLE_LOGGING", "TRUE")
    monkeypatch.setenv("DAG_ON_FAILURE", "continue")
    validate_environment()


def test_validate_environment_names_every_bad_variable(monkeypatch):
    monkeypatch.setenv("DAG_PARALLELISM", "0")
    monkeypatch.setenv("ENABLE_LOGGING", "yes")
    monkeypatch.setenv("DAG_ON_FAILURE", "explode")
    with pytest.raises(ValueError) as info:
        validate_environment()
    message = str(info.value)
    for var in ("DAG_PARALLELISM", "ENABLE_LOGGING", "DAG_ON_FAILURE"):
        assert var in message


def test_get_fs_dispatches_by_protocol():
    assert "memory" in get_fs("memory://x/y.json").protocol
    assert "file" in get_fs("/tmp/x.json").protocol


def test_join_uri():
    assert join_uri("memory://a/", "b", "/c.json") == "memory://a/b/c.json"
    assert join_uri("data", "runs") == "data/runs"


# =============================================================================
# RunConfig
# =============================================================================

def test_nested_sections_are_built(tiny_run):
    assert tiny_run.model.router.num_experts == 4
    assert tiny_run.schedule.warmup == 2
    assert tiny_run.optimizer.beta2 == 0.95
    assert tiny_run.sequences == 4


def test_unknown_key_is_named(tiny_run_dict):
    tiny_run_dict["model"]["routr"] = {}
    with pytest.raises(ValueError, match="model: routr"):
        run_config_from_dict(tiny_run_dict)


@pytest.mark.parametrize("patch", [
    {"batch_tokens": 30},
    {"timing": "cpu"},
    {"eval_every": 0},
    {"data": {"vocab": 32}},
    {"schedule": {"total_steps": 20, "warmup_steps": 20}},
    {"model": "tiny"},
])
def test_invalid_run_config(tiny_run_dict, patch):
    with pytest.raises(ValueError):
        run_config_from_dict({**tiny_run_dict, **patch})


def test_run_config_dict_round_trip(tiny_run):
    assert run_config_from_dict(run_config_to_dict(tiny_run)) == tiny_run


def test_run_dir_defaults_under_runs_dir(tiny_run_dict, tmp_path):
    run = run_config_from_dict(tiny_run_dict)
    assert run.run_dir == str(tmp_path / "data" / "runs" / "tiny_moe")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    run = load_run_config(str(path))
    assert run.name == path.stem


def test_bare_name_resolves_in_configs_dir():
    assert load_run_config("tiny_moe").model.vocab == 16


def test_name_defaults_to_file_stem(tmp_path):
    path = tmp_path / "plain.json"
    path.write_text(json.dumps({"batch_tokens": 64}))
    run = load_run_config(str(path))
    assert run.name == "plain"
    assert run.batch_tokens == 64


def test_missing_and_malformed_config_files(tmp_path):
    with pytest.raises(ValueError, match="not found"):
        load_run_config(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="not valid JSON"):
        load_run_config(str(bad))
