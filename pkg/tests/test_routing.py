import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from moe_lab.routing import (
    Choices,
    RouterConfig,
    RoutingError,
    assign_capacity,
    build_combine_dispatch,
    expert_capacity,
    load_balance_loss,
    route,
    router_z_loss,
    select_experts,
)
from moe_lab.tensor import Tensor


def probs_tensor(rows) -> Tensor:
    return Tensor(np.asarray(rows, dtype=float)[None, None], ["o", "g", "s", "e"])


def fixed_choices(experts, num_experts, gates=None) -> Choices:
    experts = np.asarray(experts, dtype=np.int64)
    if experts.ndim == 1:
        experts = experts[:, None]
    experts = experts[None, None]
    return Choices(
        num_experts=num_experts,
        experts=experts,
        gates=np.ones(experts.shape) if gates is None else np.asarray(gates, dtype=float).reshape(experts.shape),
        positions=np.full(experts.shape, -1, dtype=np.int64),
        dropped=np.zeros(experts.shape, dtype=bool),
    )


# =============================================================================
# Config and capacity
# =============================================================================

@pytest.mark.parametrize("s, e, k, c, expected", [
    (8, 4, 2, 2.0, 8),
    (8, 4, 2, 1.0, 4),
    (10, 3, 2, 1.25, 9),
])
def test_expert_capacity(s, e, k, c, expected):
    assert expert_capacity(s, RouterConfig(num_experts=e, top_k=k, capacity_factor=c)) == expected


def test_eval_capacity_factor_applies_outside_training():
    cfg = RouterConfig(num_experts=4, top_k=2, capacity_factor=1.25, eval_capacity_factor=2.0)
    assert expert_capacity(8, cfg, training=True) == 5
    assert expert_capacity(8, cfg, training=False) == 8


def test_capacity_override():
    assert expert_capacity(64, RouterConfig(capacity_override=0)) == 0


@pytest.mark.parametrize("kwargs", [
    {"num_experts": 2, "top_k": 3},
    {"top_k": 0},
    {"capacity_factor": 0.0},
    {"balance_coef": -0.1},
    {"second_choice_policy": "expert-choice"},
])
def test_router_config_validation(kwargs):
    with pytest.raises(ValueError):
        RouterConfig(**kwargs)


# =============================================================================
# select_experts
# =============================================================================

def test_select_experts_naive_normalized():
    choices = select_experts(probs_tensor([[0.5, 0.3, 0.2]]), RouterConfig(num_experts=3, top_k=2))
    assert_array_equal(choices.experts[0, 0, 0], [0, 1])
    assert_allclose(choices.gates[0, 0, 0], [0.625, 0.375], rtol=1e-15)


def test_select_experts_single_expert():
    choices = select_experts(probs_tensor(np.ones((5, 1))), RouterConfig(num_experts=1, top_k=1))
    assert_array_equal(choices.experts, np.zeros((1, 1, 5, 1)))
    assert_array_equal(choices.gates, np.ones((1, 1, 5, 1)))


def test_select_experts_too_many_choices():
    cfg = RouterConfig(num_experts=4, top_k=4)
    with pytest.raises(RoutingError):
        select_experts(probs_tensor([[0.5, 0.5]]), cfg)


def test_random_policy_needs_generator():
    cfg = RouterConfig(num_experts=3, top_k=2, second_choice_policy="random-proportional")
    with pytest.raises(RoutingError):
        select_experts(probs_tensor([[0.5, 0.3, 0.2]]), cfg)


def test_random_proportional_second_choice_frequencies():
    p = np.array([0.4, 0.3, 0.2, 0.1])
    n = 1000
    cfg = RouterConfig(num_experts=4, top_k=2, second_choice_policy="random-proportional")
    choices = select_experts(probs_tensor(np.tile(p, (n, 1))), cfg, np.random.default_rng(7))
    assert np.all(choices.experts[..., 0] == 0)

    second = choices.experts[0, 0, :, 1]
    remaining = p[1:] / p[1:].sum()
    for expert, share in zip((1, 2, 3), remaining):
        count = np.count_nonzero(second == expert)
        sigma = math.sqrt(n * share * (1 - share))
        assert abs(count - n * share) <= 5 * sigma


def test_naive_selection_is_deterministic(rng):
    probs = probs_tensor(rng.dirichlet(np.ones(8), size=32))
    cfg = RouterConfig(num_experts=8, top_k=2)
    a, b = select_experts(probs, cfg), select_experts(probs, cfg)
    assert_array_equal(a.experts, b.experts)
    assert_array_equal(a.gates, b.gates)


# =============================================================================
# assign_capacity
# =============================================================================

def test_overflow_drops_late_tokens():
    choices = assign_capacity(fixed_choices([0, 0, 0, 0], num_experts=2), capacity=2)
    assert_array_equal(choices.positions[0, 0, :, 0], [0, 1, -1, -1])
    assert_array_equal(choices.dropped[0, 0, :, 0], [False, False, True, True])


def test_rank_one_choices_are_granted_first():
    # token 0's second choice and token 1's first choice compete for expert 1
    choices = assign_capacity(fixed_choices([[0, 1], [1, 0]], num_experts=2), capacity=1)
    assert choices.dropped[0, 0, 0, 1]
    assert not choices.dropped[0, 0, 1, 0]
    assert choices.positions[0, 0, 1, 0] == 0


def test_zero_weight_choice_is_not_a_drop():
    # the second expert's probability underflows to exactly 0
    outcome = route(Tensor([[[[800.0, 0.0]]]], ["o", "g", "s", "e"]), RouterConfig(num_experts=2, top_k=2, capacity_override=4))
    choices = outcome.choices
    assert choices.gates[0, 0, 0, 1] == 0.0
    assert choices.dropped_count == 0
    assert choices.gateless_count == 1
    assert choices.surviving == 1
    assert choices.positions[0, 0, 0, 1] == -1
    assert outcome.stats.dropped_fraction == 0.0
    assert np.count_nonzero(outcome.dispatch.data) == 1


def test_zero_weight_choice_leaves_its_slot_free():
    gates = [[1.0, 0.0], [1.0, 0.0]]
    choices = assign_capacity(fixed_choices([[0, 1], [1, 0]], num_experts=2, gates=gates), capacity=1)
    assert not choices.dropped.any()
    assert_array_equal(choices.positions[0, 0], [[0, -1], [0, -1]])


def sequential_grants(experts: np.ndarray, capacity: int, num_experts: int) -> np.ndarray:
    """One slot at a time: rank 1 over all tokens, then rank 2."""
    s, k = experts.shape
    dropped = np.ones((s, k), dtype=bool)
    used = [0] * num_experts
    for r in range(k):
        for t in range(s):
            if used[experts[t, r]] < capacity:
                used[experts[t, r]] += 1
                dropped[t, r] = False
    return dropped


def test_assign_capacity_matches_sequential_oracle(rng):
    for _ in range(20):
        experts = np.stack([rng.permutation(4)[:2] for _ in range(16)])
        choices = assign_capacity(fixed_choices(experts, num_experts=4), capacity=3)
        assert_array_equal(choices.dropped[0, 0], sequential_grants(experts, 3, 4))


# =============================================================================
# combine / dispatch
# =============================================================================

def test_combine_single_token():
    choices = assign_capacity(fixed_choices([1], num_experts=2), capacity=1)
    combine, dispatch = build_combine_dispatch(choices, capacity=1)
    expected = np.zeros((1, 1, 1, 2, 1))
    expected[0, 0, 0, 1, 0] = 1.0
    assert combine.dims == ("o", "g", "s", "e", "c")
    assert_array_equal(combine.data, expected)
    assert_array_equal(dispatch.data, expected)


def test_dropped_token_has_empty_combine_row():
    choices = assign_capacity(fixed_choices([0, 0], num_experts=2), capacity=1)
    combine, _ = build_combine_dispatch(choices, capacity=1)
    assert np.count_nonzero(combine.data[0, 0, 1]) == 0


def test_combine_nonzeros_count_surviving_choices(rng):
    logits = Tensor(rng.standard_normal((2, 3, 12, 4)), ["o", "g", "s", "e"])
    outcome = route(logits, RouterConfig(num_experts=4, top_k=2, capacity_factor=1.0))
    assert np.count_nonzero(outcome.combine.data) == outcome.choices.surviving


def test_indivisible_group_split():
    choices = fixed_choices([0, 1, 0], num_experts=2).reshape((3,))
    with pytest.raises(RoutingError):
        build_combine_dispatch(choices, capacity=2, outer_batches=1, groups=2)


# =============================================================================
# Auxiliary losses
# =============================================================================

def test_balance_loss_perfect_balance():
    e = 4
    probs = probs_tensor(np.full((8, e), 1.0 / e))
    choices = fixed_choices(np.arange(8) % e, num_experts=e)
    assert load_balance_loss(probs, choices) == pytest.approx(1.0, abs=1e-12)


def test_balance_loss_total_collapse():
    e = 4
    rows = np.zeros((8, e))
    rows[:, 0] = 1.0
    choices = fixed_choices(np.zeros(8, dtype=int), num_experts=e)
    assert load_balance_loss(probs_tensor(rows), choices) == pytest.approx(e, abs=1e-12)


def test_balance_loss_direct_formula(rng):
    logits = Tensor(rng.standard_normal((1, 1, 64, 4)), ["o", "g", "s", "e"])
    outcome = route(logits, RouterConfig(num_experts=4, top_k=2))
    p = outcome.probs.data.reshape(64, 4)
    rank1 = p.argmax(axis=1)
    f = np.array([np.mean(rank1 == e) for e in range(4)])
    expected = 4 * np.sum(f * p.mean(axis=0))
    assert load_balance_loss(outcome.probs, outcome.choices) == pytest.approx(expected, rel=1e-12)


def test_z_loss_zero_logits():
    logits = Tensor.zeros([("g", 1), ("s", 3), ("e", 4)])
    assert router_z_loss(logits) == pytest.approx(math.log(4) ** 2, abs=1e-10)


def test_z_loss_is_not_shift_invariant(rng):
    raw = rng.standard_normal((1, 5, 4))
    lse = np.log(np.exp(raw + 10).sum(axis=-1))
    shifted = Tensor(raw + 10, ["g", "s", "e"])
    assert router_z_loss(shifted) == pytest.approx(np.mean(lse**2), rel=1e-12)


def test_z_loss_direct_formula(rng):
    raw = rng.standard_normal((2, 6, 8)) * 3
    direct = np.mean(np.log(np.exp(raw.astype(np.longdouble)).sum(axis=-1)) ** 2)
    assert router_z_loss(Tensor(raw, ["g", "s", "e"])) == pytest.approx(float(direct), abs=1e-10)


# =============================================================================
# Property suite
# =============================================================================

routing_instances = st.fixed_dictionaries({
    "experts": st.sampled_from([1, 2, 3, 4, 8]),
    "tokens": st.integers(1, 24),
    "groups": st.integers(1, 3),
    "top_k": st.integers(1, 2),
    "capacity_factor": st.sampled_from([0.25, 0.5, 1.0, 1.25, 2.0]),
    "seed": st.integers(0, 2**32 - 1),
    # 400 pushes most probabilities below float64 range
    "scale": st.sampled_from([2.0, 2.0, 400.0]),
})


def _route(inst, *, scale=None):
    scale = inst["scale"] if scale is None else scale
    e = inst["experts"]
    k = min(inst["top_k"], e)
    gen = np.random.default_rng(inst["seed"])
    logits = Tensor(gen.standard_normal((1, inst["groups"], inst["tokens"], e)) * scale, ["o", "g", "s", "e"])
    cfg = RouterConfig(num_experts=e, top_k=k, capacity_factor=inst["capacity_factor"])
    return logits, cfg, route(logits, cfg)


@settings(max_examples=1000, deadline=None)
@given(routing_instances)
def test_routing_invariants(inst):
    logits, cfg, outcome = _route(inst)
    e, k, s = cfg.num_experts, cfg.top_k, inst["tokens"]
    combine, dispatch = outcome.combine.data, outcome.dispatch.data

    # capacity never exceeded, per group
    occupied = dispatch.sum(axis=(2, 4))
    assert np.all(occupied <= outcome.capacity)
    # dispatch is exactly the support of combine
    assert np.all(combine >= 0)
    assert_array_equal(dispatch, (combine > 0).astype(float))
    # at most K experts per token, weights in (0, 1]
    assert np.all(np.count_nonzero(combine, axis=(3, 4)) <= k)
    assert np.all(combine[combine > 0] <= 1.0 + 1e-15)
    # per-token weights sum to 1 when nothing of the token was dropped
    token_sums = combine.sum(axis=(3, 4))
    intact = ~outcome.choices.dropped.any(axis=-1)
    assert_allclose(token_sums[intact], 1.0, atol=1e-12)
    assert np.all(token_sums <= 1.0 + 1e-12)
    # conservation: surviving + dropped + zero-weight = K * tokens
    total = outcome.choices.surviving + outcome.choices.dropped_count + outcome.choices.gateless_count
    assert total == k * s * inst["groups"]
    # stats
    assert outcome.stats.f.sum() == pytest.approx(1.0, abs=1e-12)
    assert outcome.stats.p_mean.sum() == pytest.approx(1.0, abs=1e-12)
    if outcome.capacity >= k * s:
        assert outcome.stats.dropped_fraction == 0.0


@settings(max_examples=200, deadline=None)
@given(routing_instances)
def test_losses_are_invariant_under_expert_permutation(inst):
    logits, cfg, outcome = _route(inst, scale=2.0)
    perm = np.random.default_rng(inst["seed"] + 1).permutation(cfg.num_experts)
    permuted_logits = Tensor(logits.data[..., perm], logits.dims)
    permuted = route(permuted_logits, cfg)

    assert router_z_loss(permuted_logits) == pytest.approx(router_z_loss(logits), rel=1e-12)
    assert load_balance_loss(permuted.probs, permuted.choices) == pytest.approx(
        load_balance_loss(outcome.probs, outcome.choices), rel=1e-12, abs=1e-15
    )
    # continuous logits have no ties, so routing permutes with the experts
    assert_allclose(permuted.stats.f, outcome.stats.f[perm], atol=1e-15)
    assert_allclose(permuted.combine.data, outcome.combine.data[:, :, :, perm], atol=1e-15)
