"""Compute-budget arithmetic for trading dense size against MoE training tokens.

A dense model gets 20 tokens per parameter. Its total training time
(steps x step time) is the budget; an MoE candidate with its own step time
trains for as many whole steps as fit in that budget, at the same batch size.

Everything is exact: decimal inputs such as 1.69 s go through Fraction so
step counts never suffer float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

CHINCHILLA_RATIO = 20


def _exact(value: float | int | str | Fraction, name: str) -> Fraction:
    exact = value if isinstance(value, Fraction) else Fraction(str(value))
    if exact <= 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return exact


def chinchilla_tokens(params: float) -> int:
    """20 x params, rounded down to whole tokens."""
    return math.floor(CHINCHILLA_RATIO * _exact(params, "params"))


@dataclass(frozen=True)
class TrainBudget:
    dense_params: int
    dense_tokens: int
    batch_tokens: int
    dense_steps: int
    dense_step_time: Fraction
    budget_seconds: Fraction

    def to_dict(self) -> dict:
        return {
            "dense_params": self.dense_params,
            "dense_tokens": self.dense_tokens,
            "batch_tokens": self.batch_tokens,
            "dense_steps": self.dense_steps,
            "dense_step_time": float(self.dense_step_time),
            "budget_seconds": float(self.budget_seconds),
        }


@dataclass(frozen=True)
class MoEPlan:
    moe_step_time: Fraction
    moe_steps: int
    moe_tokens: int

    def to_dict(self) -> dict:
        return {
            "moe_step_time": float(self.moe_step_time),
            "moe_steps": self.moe_steps,
            "moe_tokens": self.moe_tokens,
        }


def dense_budget(params: float, batch_tokens: float, step_time: float) -> TrainBudget:
    tokens = chinchilla_tokens(params)
    batch = _exact(batch_tokens, "batch_tokens")
    if batch.denominator != 1:
        raise ValueError(f"batch_tokens must be a whole number, got {batch_tokens}")
    seconds = _exact(step_time, "step_time")
    steps = tokens // int(batch)
    if steps < 1:
        raise ValueError(f"{tokens} dense tokens do not fill a single batch of {int(batch)}")
    return TrainBudget(
        dense_params=math.floor(_exact(params, "params")),
        dense_tokens=tokens,
        batch_tokens=int(batch),
        dense_steps=steps,
        dense_step_time=seconds,
        budget_seconds=steps * seconds,
    )


def moe_token_allocation(budget: TrainBudget, moe_step_time: float) -> MoEPlan:
    """Whole MoE steps that fit in the dense budget, at the dense batch size."""
    step_time = _exact(moe_step_time, "moe_step_time")
    steps = math.floor(budget.budget_seconds / step_time)
    return MoEPlan(moe_step_time=step_time, moe_steps=steps, moe_tokens=steps * budget.batch_tokens)


# =============================================================================
# Reference budgets
# =============================================================================

@dataclass(frozen=True)
class BudgetReference:
    name: str
    dense_params: float
    batch_tokens: int
    dense_step_time: float
    candidates: tuple[tuple[str, float, float], ...]  # (moe name, step time, reported tokens)


BUDGET_REFERENCES: dict[str, BudgetReference] = {
    ref.name: ref
    for ref in (
        BudgetReference("6.4B", 6.4e9, 1_000_000, 1.69, (
            ("1.6B/256E", 0.82, 264e9),
            ("4.8B/256E", 1.41, 153e9),
        )),
        BudgetReference("12.6B", 12.6e9, 2_000_000, 2.94, (
            ("4.5B/256E", 1.50, 494e9),
            ("8.1B/256E", 2.60, 285e9),
        )),
        BudgetReference("29.6B", 29.6e9, 2_000_000, 6.56, (
            ("6.4B/64E", 1.85, 2128e9),
        )),
    )
}


@dataclass(frozen=True)
class ReferenceRow:
    reference: str
    moe: str
    budget: TrainBudget
    plan: MoEPlan
    reported_tokens: float

    @property
    def relative_error(self) -> float:
        return abs(self.plan.moe_tokens - self.reported_tokens) / self.reported_tokens

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "moe": self.moe,
            **self.budget.to_dict(),
            **self.plan.to_dict(),
            "reported_tokens": self.reported_tokens,
            "relative_error": self.relative_error,
        }


def plan_reference(name: str) -> list[ReferenceRow]:
    if name not in BUDGET_REFERENCES:
        raise ValueError(f"unknown reference '{name}'; expected one of {sorted(BUDGET_REFERENCES)}")
    ref = BUDGET_REFERENCES[name]
    budget = dense_budget(ref.dense_params, ref.batch_tokens, ref.dense_step_time)
    return [
        ReferenceRow(ref.name, moe, budget, moe_token_allocation(budget, step_time), reported)
        for moe, step_time, reported in ref.candidates
    ]


def plan_references() -> list[ReferenceRow]:
    return [row for name in BUDGET_REFERENCES for row in plan_reference(name)]
