import dataclasses
import math

import numpy as np
import pytest

from conftest import CONFIGS
from moe_lab import trainer
from moe_lab.config import load_run_config, run_config_from_dict
from moe_lab.io import METRICS_COLUMNS, append_metrics_row, load_json, load_metrics
from moe_lab.trainer import (
    TrainingDivergedError,
    grad_check_run,
    late_dropped_fraction,
    model_step_seconds,
    rows_to_table,
    tradeoff_table,
    train,
    write_tradeoff,
)


def _with_out_dir(run, path):
    return dataclasses.replace(run, out_dir=str(path))


def test_tiny_run_artifacts(tiny_run):
    result = train(tiny_run, verbose=False)
    assert [r.step for r in result.rows] == [5, 10, 15, 20]
    assert [r.tokens_seen for r in result.rows] == [160, 320, 480, 640]

    table = load_metrics(result.metrics_uri)
    assert table.column_names == METRICS_COLUMNS
    assert table.num_rows == 4
    assert set(table.column("wall_seconds_per_step").to_pylist()) == {model_step_seconds(tiny_run)}

    summary = load_json(f"{tiny_run.run_dir}/summary.json")
    assert summary["uniform_loss"] == pytest.approx(math.log(16))
    assert summary["params_activated"] < summary["params_total"]
    assert 0 <= summary["entropy_rate"] < summary["uniform_loss"]
    assert summary["final_eval_loss"] < summary["uniform_loss"]
    assert load_json(f"{tiny_run.run_dir}/config.json")["name"] == "tiny_moe"


def test_model_timing_runs_are_byte_identical(tiny_run, tmp_path):
    first = train(_with_out_dir(tiny_run, tmp_path / "a"), verbose=False)
    second = train(_with_out_dir(tiny_run, tmp_path / "b"), verbose=False)
    for name in ("metrics.csv", "checkpoint.bin", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert first.summary == second.summary


def test_rerun_replaces_metrics(tiny_run):
    train(tiny_run, verbose=False)
    result = train(tiny_run, verbose=False)
    assert load_metrics(result.metrics_uri).num_rows == 4


def test_divergence_keeps_earlier_rows(tiny_run, monkeypatch):
    real = trainer.loss_and_grads
    calls = {"n": 0}

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        result = real(*args, **kwargs)
        if calls["n"] == 7:
            result.loss = float("nan")
        return result

    monkeypatch.setattr(trainer, "loss_and_grads", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_run, verbose=False)
    assert info.value.step == 7
    assert load_metrics(f"{tiny_run.run_dir}/metrics.csv").column("step").to_pylist() == [5]


def test_non_finite_gradient_is_a_divergence(tiny_run, monkeypatch):
    real = trainer.loss_and_grads

    def poisoned(*args, **kwargs):
        result = real(*args, **kwargs)
        name = sorted(result.grads)[0]
        result.grads[name] = np.full_like(result.grads[name], np.inf)
        return result

    monkeypatch.setattr(trainer, "loss_and_grads", poisoned)
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train(tiny_run, verbose=False)


def test_first_update_uses_a_nonzero_learning_rate(tiny_run, monkeypatch):
    real = trainer.adamw_step
    rates = []

    def recording(params, grads, state, lr, cfg):
        rates.append(lr)
        return real(params, grads, state, lr, cfg)

    monkeypatch.setattr(trainer, "adamw_step", recording)
    train(tiny_run, verbose=False)
    assert len(rates) == 20
    assert rates[0] == pytest.approx(0.0015)
    assert rates[1] == pytest.approx(0.003)
    assert rates[1:] == sorted(rates[1:], reverse=True)


def test_corpus_too_small_for_eval(tiny_run_dict, tmp_path):
    tiny_run_dict["data"]["corpus_tokens"] = 100
    run = run_config_from_dict({**tiny_run_dict, "out_dir": str(tmp_path / "run")})
    with pytest.raises(ValueError, match="eval split"):
        train(run, verbose=False)


def test_late_dropped_fraction():
    rows = [
        trainer.MetricsRow(step, 1.0, 1.0, 1.0, 0.0, dropped, step * 8, 0.1)
        for step, dropped in zip(range(10, 101, 10), [0.5] * 9 + [0.1])
    ]
    assert late_dropped_fraction(rows_to_table(rows)) == pytest.approx(0.1)
    assert late_dropped_fraction(rows_to_table(rows), fraction=0.2) == pytest.approx(0.3)


# =============================================================================
# Trade-off table
# =============================================================================

def _fake_run(runs_dir, name, seconds, eval_loss):
    for step in (10, 20):
        append_metrics_row(str(runs_dir / name / "metrics.csv"), {
            "step": step, "train_loss": 2.0, "eval_loss": eval_loss, "balance_loss": 1.0, "z_loss": 0.0,
            "dropped_fraction": 0.0, "tokens_seen": step * 32, "wall_seconds_per_step": seconds,
        })


def test_tradeoff_table_sorted_by_step_time(tmp_path):
    _fake_run(tmp_path, "moe", 0.02, 1.5)
    _fake_run(tmp_path, "dense", 0.01, 1.75)
    _fake_run(tmp_path, "big", 0.04, 1.25)
    df = tradeoff_table(str(tmp_path))
    assert df["run"].tolist() == ["dense", "moe", "big"]
    assert df["final_eval_loss"].tolist() == [1.75, 1.5, 1.25]
    assert df["steps"].tolist() == [20, 20, 20]

    _, uri = write_tradeoff(str(tmp_path))
    assert uri == f"{tmp_path}/tradeoff.csv"
    assert (tmp_path / "tradeoff.csv").read_text().splitlines()[0].startswith("run,step_seconds")


def test_tradeoff_needs_runs(tmp_path):
    with pytest.raises(ValueError, match="no runs"):
        tradeoff_table(str(tmp_path))


def test_grad_check_on_tiny_config(tiny_run):
    report = grad_check_run(tiny_run, samples=3, sequences=1)
    assert report.checked > 0
    assert report.passed(1e-4)


@pytest.fixture
def random_policy_run(tiny_run_dict, tmp_path):
    tiny_run_dict["model"]["router"]["second_choice_policy"] = "random-proportional"
    return run_config_from_dict({**tiny_run_dict, "out_dir": str(tmp_path / "runs" / "random")})


def test_random_second_choice_trains_and_evaluates(random_policy_run, tmp_path):
    first = train(random_policy_run, verbose=False)
    assert [r.step for r in first.rows] == [5, 10, 15, 20]
    assert all(math.isfinite(r.eval_loss) for r in first.rows)
    again = train(_with_out_dir(random_policy_run, tmp_path / "again"), verbose=False)
    assert [r.eval_loss for r in again.rows] == [r.eval_loss for r in first.rows]


def test_grad_check_with_random_second_choice(random_policy_run):
    report = grad_check_run(random_policy_run, samples=3, sequences=1)
    assert report.checked > 0
    assert report.passed(1e-4)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["dense_baseline", "moe_every2", "moe_every2_no_balance"])
def test_toy_configs_learn(name, tmp_path):
    run = _with_out_dir(load_run_config(str(CONFIGS / f"{name}.json")), tmp_path / name)
    result = train(run, verbose=False)
    assert result.summary["final_eval_loss"] < result.summary["uniform_loss"] - 0.1
