"""Toy training runs for the speed-accuracy experiment.

Three configs from CONFIGS_DIR, trained on the same Markov corpus:
- dense_baseline: 2-layer dense transformer
- moe_every2: layer 2 is a 4-expert top-2 MoE layer, balance loss on
- moe_every2_no_balance: same MoE run with the balance loss switched off

Each run writes config.json, metrics.csv, checkpoint.* and summary.json
under <DATA_DIR>/experiment/runs/<name>/.
"""

import dataclasses
import math

import pyarrow as pa

from moe_lab.config import get_data_dir, join_uri, load_run_config
from moe_lab.io import load_metrics
from moe_lab.testing import (
    assert_finite,
    assert_in_range,
    assert_monotone_increasing,
    assert_positive,
    validate,
)
from moe_lab.trainer import train


def experiment_runs_dir() -> str:
    return join_uri(get_data_dir(), "experiment", "runs")


def test(table: pa.Table, vocab: int = 64) -> None:
    """Validate one run's metrics table."""
    validate(table, {
        "columns": {
            "step": "int",
            "train_loss": "double",
            "eval_loss": "double",
            "dropped_fraction": "double",
            "tokens_seen": "int",
            "wall_seconds_per_step": "double",
        },
        "not_null": ["step", "train_loss", "eval_loss", "tokens_seen"],
        "unique": ["step"],
        "min_rows": 2,
    })
    assert_monotone_increasing(table, "step")
    assert_monotone_increasing(table, "tokens_seen")
    assert_finite(table, "train_loss")
    assert_finite(table, "eval_loss")
    assert_in_range(table, "dropped_fraction", 0.0, 1.0)
    assert_positive(table, "wall_seconds_per_step", allow_zero=False)
    assert_in_range(table, "eval_loss", 0.0, 2 * math.log(vocab))

    print(f"  Validated {len(table):,} metrics rows")


def _train(name: str) -> None:
    run = load_run_config(name)
    run = dataclasses.replace(run, out_dir=join_uri(experiment_runs_dir(), run.name))
    result = train(run)
    test(load_metrics(result.metrics_uri), run.model.vocab)


def dense_baseline():
    _train("dense_baseline")


def moe_every2():
    _train("moe_every2")


def moe_every2_no_balance():
    _train("moe_every2_no_balance")


NODES = {
    dense_baseline: [],
    moe_every2: [],
    moe_every2_no_balance: [],
}

if __name__ == "__main__":
    dense_baseline()
    moe_every2()
    moe_every2_no_balance()
