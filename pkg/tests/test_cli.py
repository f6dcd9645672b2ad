import json

import pytest

from moe_lab.cli import cli_dispatch, route_bench


def test_plan_budget_reference(capsys):
    assert cli_dispatch(["plan-budget", "--reference", "6.4B"]) == 0
    out = capsys.readouterr().out
    assert "263804 steps" in out
    assert "263.8B tokens" in out


def test_plan_budget_explicit(capsys):
    code = cli_dispatch([
        "plan-budget", "--params", "6.4e9", "--batch", "1000000", "--step-time", "1.69",
        "--moe-step-time", "0.82", "--json",
    ])
    assert code == 0
    out = capsys.readouterr().out
    payload = json.loads(out[out.index("{"):])
    assert payload["budget"]["dense_steps"] == 128000
    assert payload["moe"][0]["moe_steps"] == 263804


def test_plan_budget_needs_inputs(capsys):
    assert cli_dispatch(["plan-budget", "--params", "6.4e9"]) == 1
    assert "--step-time" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["route-bench"], ["plan-budget", "--reference", "7B"], ["launch"]])
def test_usage_errors(argv):
    assert cli_dispatch(argv) == 2


def test_simulate_sharding(tmp_path, capsys):
    out = tmp_path / "sim.json"
    code = cli_dispatch([
        "simulate-sharding", "--preset", "1.6b-moe", "--mesh", "2,4,4", "--devices", "32", "--out", str(out),
    ])
    assert code == 0
    assert "[sim] 3d on mesh" in capsys.readouterr().out
    report = json.loads(out.read_text())
    assert report["strategy"] == "3d"


def test_simulate_naive_2d(tmp_path, capsys):
    out = tmp_path / "naive.json"
    code = cli_dispatch([
        "simulate-sharding", "--preset", "1.6b-moe", "--strategy", "naive-2d", "--mesh", "64,1,4", "--out", str(out),
    ])
    assert code == 0
    report = json.loads(out.read_text())
    assert (report["experts"], report["expert_slices"]) == (64, 256)
    assert report["tensors"]["moe_ffn1"]["shard_shape"] == [1, 2048, 1408]


def test_2d_strategy_rejects_an_expert_axis(capsys):
    code = cli_dispatch(["simulate-sharding", "--preset", "1.6b-moe", "--strategy", "padded-2d", "--mesh", "4,64,1"])
    assert code == 1
    assert "no expert axis" in capsys.readouterr().err


def test_mesh_mismatch_is_a_domain_error(capsys):
    code = cli_dispatch(["simulate-sharding", "--preset", "1.6b-moe", "--mesh", "2,4,4", "--devices", "8"])
    assert code == 1
    assert "does not match" in capsys.readouterr().err


def test_bad_environment_is_a_domain_error(monkeypatch, capsys):
    monkeypatch.setenv("DAG_PARALLELISM", "many")
    assert cli_dispatch(["plan-budget", "--reference", "6.4B"]) == 1
    assert "DAG_PARALLELISM" in capsys.readouterr().err


def test_compare_sharding(tmp_path, capsys):
    out = tmp_path / "compare.json"
    assert cli_dispatch(["compare-sharding", "--preset", "1.6b-moe", "--devices", "256", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split()[0] == "naive-2d"
    assert lines[-2].split()[0] == "3d"
    assert out.exists()


def test_route_bench(capsys):
    assert cli_dispatch(["route-bench", "--experts", "8", "--tokens", "64", "--repeats", "1"]) == 0
    assert "capacity 32" in capsys.readouterr().out


def test_route_bench_without_overflow():
    r = route_bench(experts=8, tokens=64, top_k=2, capacity_factor=4.0, repeats=2)
    assert r["capacity"] == 64
    assert r["dropped_fraction"] == 0.0
    assert r["max_load"] <= 64


def test_train_then_tradeoff(tmp_path, capsys):
    runs = tmp_path / "runs"
    assert cli_dispatch(["train", "tiny_moe", "--out-dir", str(runs / "tiny_moe")]) == 0
    assert "[train] tiny_moe finished" in capsys.readouterr().out
    assert (runs / "tiny_moe" / "checkpoint.bin").exists()

    assert cli_dispatch(["tradeoff", str(runs)]) == 0
    assert "[tradeoff] 1 runs" in capsys.readouterr().out
    assert (runs / "tradeoff.csv").exists()


def test_tradeoff_on_empty_dir(tmp_path, capsys):
    assert cli_dispatch(["tradeoff", str(tmp_path)]) == 1
    assert "no runs" in capsys.readouterr().err


def test_missing_config(capsys):
    assert cli_dispatch(["train", "no_such_config"]) == 1
    assert "not found" in capsys.readouterr().err


def test_grad_check_command(capsys):
    assert cli_dispatch(["grad-check", "tiny_moe", "--samples", "2"]) == 0
    assert "[grad-check] tiny_moe: passed" in capsys.readouterr().out


def test_run_events_logged(monkeypatch, tmp_path):
    monkeypatch.setenv("ENABLE_LOGGING", "true")
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    cli_dispatch(["plan-budget", "--reference", "12.6B"])
    rows = (tmp_path / "logs" / "runs.csv").read_text().splitlines()
    assert len(rows) == 3
    assert rows[2].split(",")[2:5] == ["end", "plan-budget", "completed"]
