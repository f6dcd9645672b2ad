"""Budget planner over the reference dense budgets.

For each dense scale (6.4B, 12.6B, 29.6B) and each MoE candidate step time,
the MoE token allocation and its distance to the reported token count.
"""

import pyarrow as pa

from moe_lab.budget import plan_references
from moe_lab.config import get_data_dir, join_uri
from moe_lab.io import save_json
from moe_lab.testing import assert_in_range, assert_positive, validate


def test(table: pa.Table) -> None:
    validate(table, {
        "columns": {
            "reference": "string",
            "moe": "string",
            "dense_tokens": "int",
            "moe_steps": "int",
            "moe_tokens": "int",
            "relative_error": "double",
        },
        "not_null": ["reference", "moe", "moe_tokens"],
        "unique": ["reference", "moe"],
        "min_rows": 5,
    })
    assert_positive(table, "moe_tokens", allow_zero=False)
    assert_in_range(table, "relative_error", 0.0, 0.02)

    print(f"  Validated {len(table):,} budget rows")


def budget_table():
    rows = [r.to_dict() for r in plan_references()]
    test(pa.Table.from_pylist(rows))
    uri = join_uri(get_data_dir(), "experiment", "budget_table.json")
    save_json(rows, uri)
    for r in rows:
        print(f"  {r['reference']:>6} -> {r['moe']:<10} {r['moe_tokens'] / 1e9:8.1f}B tokens ({r['relative_error']:.2%})")


NODES = {
    budget_table: [],
}

if __name__ == "__main__":
    budget_table()
