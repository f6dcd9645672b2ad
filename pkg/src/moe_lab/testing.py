"""
Validators for experiment output tables.

Usage in a node's test():
    from moe_lab.testing import validate, assert_finite, assert_monotone_increasing

    def test(table):
        validate(table, {
            "columns": {"step": "int", "eval_loss": "double"},
            "not_null": ["step", "eval_loss"],
            "unique": ["step"],
            "min_rows": 2,
        })
        assert_finite(table, "eval_loss")
        assert_monotone_increasing(table, "step")
"""

import math

import pyarrow as pa
import pyarrow.compute as pc


def _values(table: pa.Table, column: str) -> list:
    assert column in table.column_names, f"Missing column: {column}"
    return [v for v in table.column(column).to_pylist() if v is not None]


# =============================================================================
# Numeric Validators
# =============================================================================

def assert_positive(table: pa.Table, column: str, allow_zero: bool = True) -> None:
    values = _values(table, column)
    invalid = [v for v in values if v < 0 or (v == 0 and not allow_zero)]
    kind = "negative" if allow_zero else "non-positive"
    assert not invalid, f"Column '{column}' has {kind} values: {invalid[:5]}..."


def assert_in_range(table: pa.Table, column: str, min_val: float = None, max_val: float = None) -> None:
    values = _values(table, column)
    invalid = [
        v for v in values
        if (min_val is not None and v < min_val) or (max_val is not None and v > max_val)
    ]
    assert not invalid, f"Column '{column}' has values outside [{min_val}, {max_val}]: {invalid[:5]}..."


def assert_finite(table: pa.Table, column: str) -> None:
    invalid = [v for v in _values(table, column) if not math.isfinite(v)]
    assert not invalid, f"Column '{column}' has non-finite values: {invalid[:5]}..."


def assert_monotone_increasing(table: pa.Table, column: str, strict: bool = True) -> None:
    values = _values(table, column)
    pairs = list(zip(values, values[1:]))
    bad = [(a, b) for a, b in pairs if (b <= a if strict else b < a)]
    assert not bad, f"Column '{column}' is not {'strictly ' if strict else ''}increasing: {bad[:5]}..."


# =============================================================================
# Schema Validator
# =============================================================================

def validate(table: pa.Table, schema: dict) -> None:
    """Check a table against a schema dict; raises AssertionError on the first failure.

    Schema keys (all optional):
        columns   {name: substring expected in the arrow type}
        not_null  columns that must not contain nulls
        unique    column or columns forming a unique key
        min_rows / max_rows
    """
    if (min_rows := schema.get("min_rows")) is not None:
        assert table.num_rows >= min_rows, f"Expected >= {min_rows} rows, got {table.num_rows}"
    if (max_rows := schema.get("max_rows")) is not None:
        assert table.num_rows <= max_rows, f"Expected <= {max_rows} rows, got {table.num_rows}"

    for col, expected in schema.get("columns", {}).items():
        assert col in table.column_names, f"Missing column: {col}"
        actual = str(table.schema.field(col).type)
        assert expected in actual, f"Column '{col}': expected type containing '{expected}', got '{actual}'"

    for col in schema.get("not_null", []):
        nulls = table.column(col).null_count
        assert nulls == 0, f"Column '{col}' has {nulls} null values"

    if unique := schema.get("unique"):
        keys = [unique] if isinstance(unique, str) else list(unique)
        distinct = table.group_by(keys).aggregate([]).num_rows
        duplicates = table.num_rows - distinct
        assert duplicates == 0, f"Columns {keys} have {duplicates} duplicate rows"


def column_stats(table: pa.Table, column: str) -> dict:
    """min / max / mean of a numeric column."""
    col = table.column(column)
    return {
        "min": pc.min(col).as_py(),
        "max": pc.max(col).as_py(),
        "mean": pc.mean(col).as_py(),
    }
