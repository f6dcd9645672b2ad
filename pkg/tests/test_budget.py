from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from moe_lab.budget import (
    BUDGET_REFERENCES,
    chinchilla_tokens,
    dense_budget,
    moe_token_allocation,
    plan_reference,
    plan_references,
)


@pytest.mark.parametrize("params, tokens", [
    (6.4e9, 128_000_000_000),
    (12.6e9, 252_000_000_000),
    (29.6e9, 592_000_000_000),
    (1, 20),
])
def test_chinchilla_tokens(params, tokens):
    assert chinchilla_tokens(params) == tokens


def test_chinchilla_rejects_non_positive():
    with pytest.raises(ValueError):
        chinchilla_tokens(0)


def test_dense_budget_6_4b():
    budget = dense_budget(6.4e9, 1_000_000, 1.69)
    assert budget.dense_tokens == 128_000_000_000
    assert budget.dense_steps == 128_000
    assert budget.budget_seconds == 216_320
    assert budget.to_dict()["budget_seconds"] == 216320.0


def test_dense_budget_29_6b():
    assert dense_budget(29.6e9, 2_000_000, 6.56).dense_steps == 296_000


def test_dense_budget_single_step():
    budget = dense_budget(1, 20, 1.0)
    assert (budget.dense_tokens, budget.dense_steps, budget.budget_seconds) == (20, 1, 1)


@pytest.mark.parametrize("kwargs", [
    {"params": 6.4e9, "batch_tokens": 1.5, "step_time": 1.0},
    {"params": 1, "batch_tokens": 40, "step_time": 1.0},
    {"params": 6.4e9, "batch_tokens": 1_000_000, "step_time": 0},
])
def test_dense_budget_errors(kwargs):
    with pytest.raises(ValueError):
        dense_budget(**kwargs)


def test_moe_allocation_1_6b():
    plan = moe_token_allocation(dense_budget(6.4e9, 1_000_000, 1.69), 0.82)
    assert plan.moe_steps == 263_804
    assert plan.moe_tokens == 263_804_000_000
    assert abs(plan.moe_tokens - 264e9) / 264e9 < 0.02


def test_moe_allocation_4_5b():
    plan = moe_token_allocation(dense_budget(12.6e9, 2_000_000, 2.94), 1.50)
    assert plan.moe_steps == 246_960
    assert plan.moe_tokens == 493_920_000_000


def test_moe_allocation_is_exact_on_whole_quotients():
    # 1941760 / 1.85 is exactly 1049600; float division would land one step short
    plan = moe_token_allocation(dense_budget(29.6e9, 2_000_000, 6.56), 1.85)
    assert plan.moe_steps == 1_049_600
    assert plan.moe_tokens == 2_099_200_000_000


def test_equal_step_time_keeps_dense_tokens():
    budget = dense_budget(6.4e9, 1_000_000, 1.69)
    assert moe_token_allocation(budget, 1.69).moe_tokens == budget.dense_tokens


def test_reference_rows_within_two_percent():
    rows = plan_references()
    assert len(rows) == sum(len(ref.candidates) for ref in BUDGET_REFERENCES.values()) == 5
    for row in rows:
        assert row.relative_error <= 0.02, row.moe
    six_four = {row.moe: row for row in plan_reference("29.6B")}["6.4B/64E"]
    assert six_four.relative_error == pytest.approx(0.01353, abs=1e-4)


def test_reference_row_dict():
    row = plan_reference("6.4B")[0]
    values = row.to_dict()
    assert values["reference"] == "6.4B"
    assert values["moe"] == "1.6B/256E"
    assert values["dense_steps"] == 128_000
    assert values["moe_tokens"] == 263_804_000_000


def test_unknown_reference():
    with pytest.raises(ValueError):
        plan_reference("7B")


step_times = st.decimals(min_value="0.01", max_value="20", places=2).map(float)


@given(
    params=st.integers(10**6, 10**11),
    batch=st.integers(1, 10**6),
    dense_time=step_times,
    moe_time=step_times,
)
def test_budget_conservation(params, batch, dense_time, moe_time):
    if 20 * params < batch:
        return
    budget = dense_budget(params, batch, dense_time)
    plan = moe_token_allocation(budget, moe_time)
    assert plan.moe_step_time == Fraction(str(moe_time))
    assert plan.moe_steps * plan.moe_step_time <= budget.budget_seconds
    assert budget.budget_seconds < (plan.moe_steps + 1) * plan.moe_step_time
    assert plan.moe_tokens == plan.moe_steps * batch


@given(a=step_times, b=step_times)
def test_faster_steps_never_lose_tokens(a, b):
    budget = dense_budget(6.4e9, 1_000_000, 1.69)
    fast, slow = sorted((a, b))
    assert moe_token_allocation(budget, fast).moe_tokens >= moe_token_allocation(budget, slow).moe_tokens
