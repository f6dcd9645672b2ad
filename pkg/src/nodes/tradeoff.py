"""Speed-accuracy trade-off over the toy runs.

Writes <DATA_DIR>/experiment/tradeoff.csv (one row per run, fastest first)
and tradeoff.json with the MoE-vs-dense comparison and the balance-loss check:
late-training dropped fraction with the balance loss on should be below the
same run with it off.
"""

import pyarrow as pa

from moe_lab.config import get_data_dir, join_uri
from moe_lab.io import load_json, load_metrics, save_json
from moe_lab.testing import assert_finite, assert_positive, validate
from moe_lab.trainer import late_dropped_fraction, write_tradeoff

from nodes.toy_runs import dense_baseline, experiment_runs_dir, moe_every2, moe_every2_no_balance


def test(table: pa.Table) -> None:
    validate(table, {
        "columns": {
            "run": "string",
            "step_seconds": "double",
            "final_eval_loss": "double",
        },
        "not_null": ["run", "step_seconds", "final_eval_loss"],
        "unique": ["run"],
        "min_rows": 3,
    })
    assert_positive(table, "step_seconds", allow_zero=False)
    assert_finite(table, "final_eval_loss")
    times = table.column("step_seconds").to_pylist()
    assert times == sorted(times), "trade-off rows must be sorted by step time"

    print(f"  Validated {len(table):,} trade-off rows")


def tradeoff_report():
    runs_dir = experiment_runs_dir()
    out_dir = join_uri(get_data_dir(), "experiment")
    df, uri = write_tradeoff(runs_dir, join_uri(out_dir, "tradeoff.csv"))
    test(pa.Table.from_pandas(df, preserve_index=False))

    def summary(name: str) -> dict:
        return load_json(join_uri(runs_dir, name, "summary.json"))

    def late_dropped(name: str) -> float:
        return late_dropped_fraction(load_metrics(join_uri(runs_dir, name, "metrics.csv")))

    dense, moe = summary("dense_baseline"), summary("moe_every2")
    balanced, unbalanced = late_dropped("moe_every2"), late_dropped("moe_every2_no_balance")
    report = {
        "runs": df.to_dict(orient="records"),
        "moe_minus_dense_eval_loss": moe["final_eval_loss"] - dense["final_eval_loss"],
        "moe_step_time_ratio": moe["mean_step_seconds"] / dense["mean_step_seconds"],
        "activated_params": {"dense": dense["params_activated"], "moe": moe["params_activated"]},
        "late_dropped_fraction": {"balance_on": balanced, "balance_off": unbalanced},
        "balance_loss_reduces_drops": balanced < unbalanced,
        "entropy_rate": dense["entropy_rate"],
    }
    save_json(report, join_uri(out_dir, "tradeoff.json"))
    print(f"  MoE - dense eval loss: {report['moe_minus_dense_eval_loss']:+.4f}")
    print(f"  late dropped fraction: balance on {balanced:.4f}, off {unbalanced:.4f}")


NODES = {
    tradeoff_report: [dense_baseline, moe_every2, moe_every2_no_balance],
}

if __name__ == "__main__":
    tradeoff_report()
