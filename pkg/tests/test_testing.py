import math

import pyarrow as pa
import pytest

from moe_lab.testing import (
    assert_finite,
    assert_in_range,
    assert_monotone_increasing,
    assert_positive,
    column_stats,
    validate,
)

TABLE = pa.table({
    "step": [5, 10, 15],
    "eval_loss": [2.5, 2.0, 1.75],
    "run": ["a", "a", "a"],
})


def test_validate_passes():
    validate(TABLE, {
        "columns": {"step": "int", "eval_loss": "double", "run": "string"},
        "not_null": ["step"],
        "unique": ["step"],
        "min_rows": 3,
        "max_rows": 3,
    })


@pytest.mark.parametrize("schema, message", [
    ({"min_rows": 4}, "Expected >= 4"),
    ({"max_rows": 2}, "Expected <= 2"),
    ({"columns": {"missing": "int"}}, "Missing column"),
    ({"columns": {"step": "double"}}, "expected type"),
    ({"unique": "run"}, "duplicate"),
])
def test_validate_failures(schema, message):
    with pytest.raises(AssertionError, match=message):
        validate(TABLE, schema)


def test_not_null():
    with pytest.raises(AssertionError, match="null"):
        validate(pa.table({"x": [1, None]}), {"not_null": ["x"]})


def test_numeric_validators():
    assert_positive(TABLE, "eval_loss", allow_zero=False)
    assert_in_range(TABLE, "eval_loss", 0, math.log(64))
    assert_finite(TABLE, "eval_loss")
    assert_monotone_increasing(TABLE, "step")
    with pytest.raises(AssertionError):
        assert_in_range(TABLE, "eval_loss", max_val=2.0)
    with pytest.raises(AssertionError):
        assert_monotone_increasing(TABLE, "eval_loss")
    with pytest.raises(AssertionError):
        assert_finite(pa.table({"x": [1.0, math.inf]}), "x")
    with pytest.raises(AssertionError):
        assert_positive(pa.table({"x": [0.0]}), "x", allow_zero=False)


def test_monotone_non_strict():
    table = pa.table({"x": [1, 1, 2]})
    assert_monotone_increasing(table, "x", strict=False)
    with pytest.raises(AssertionError):
        assert_monotone_increasing(table, "x")


def test_column_stats():
    assert column_stats(TABLE, "eval_loss") == {"min": 1.75, "max": 2.5, "mean": pytest.approx(6.25 / 3)}
