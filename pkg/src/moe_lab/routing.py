"""Top-K gating with expert capacity.

Pipeline for one MoE layer, per group of S tokens:

    probs    = softmax(logits, "e")
    choices  = select_experts(probs)          rank-1 argmax, rank-2 by policy
    capacity = expert_capacity(S)             ceil(C * K * S / E)
    choices  = assign_capacity(choices)       rank-major slot grants, overflow dropped
    combine, dispatch = build_combine_dispatch(choices)   (O, G, S, E, C)

Choice arrays keep the token layout of the probs they came from with a
trailing K axis, so a (O, G, S, E) probs tensor gives (O, G, S, K) choices.
Capacity is enforced per group (every leading index except S).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import GradGraph, Var
from .tensor import Tensor, softmax, top_k_indices

SECOND_CHOICE_POLICIES = ("naive-second-best", "random-proportional")


class RoutingError(ValueError):
    """Invalid routing request: K > E, bad token split, missing generator."""


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int = 4
    top_k: int = 2
    capacity_factor: float = 2.0
    second_choice_policy: str = "naive-second-best"
    balance_coef: float = 0.01
    z_coef: float = 0.001
    normalize_gates: bool = True
    eval_capacity_factor: float | None = None
    capacity_override: int | None = None

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must be in [1, num_experts={self.num_experts}], got {self.top_k}")
        if self.capacity_factor <= 0:
            raise ValueError(f"capacity_factor must be > 0, got {self.capacity_factor}")
        if self.eval_capacity_factor is not None and self.eval_capacity_factor <= 0:
            raise ValueError(f"eval_capacity_factor must be > 0, got {self.eval_capacity_factor}")
        if self.capacity_override is not None and self.capacity_override < 0:
            raise ValueError(f"capacity_override must be >= 0, got {self.capacity_override}")
        if self.second_choice_policy not in SECOND_CHOICE_POLICIES:
            raise ValueError(
                f"second_choice_policy must be one of {SECOND_CHOICE_POLICIES}, "
                f"got '{self.second_choice_policy}'"
            )
        if self.balance_coef < 0 or self.z_coef < 0:
            raise ValueError("balance_coef and z_coef must be >= 0")


@dataclass(frozen=True)
class RoutingChoice:
    rank: int
    expert: int
    gate: float
    position: int
    dropped: bool


@dataclass
class Choices:
    """Per-token ranked choices. Arrays share the shape (..., S, K)."""

    num_experts: int
    experts: np.ndarray
    gates: np.ndarray
    positions: np.ndarray
    dropped: np.ndarray

    @property
    def top_k(self) -> int:
        return self.experts.shape[-1]

    @property
    def tokens(self) -> int:
        return int(np.prod(self.experts.shape[:-1]))

    @property
    def granted(self) -> np.ndarray:
        """Choices that hold a slot: not dropped and carrying gate weight."""
        return ~self.dropped & (self.gates > 0)

    @property
    def surviving(self) -> int:
        return int(np.count_nonzero(self.granted))

    @property
    def gateless_count(self) -> int:
        """Zero-weight choices; they take no slot and are not drops."""
        return int(np.count_nonzero(~self.dropped & (self.gates <= 0)))

    @property
    def dropped_count(self) -> int:
        return int(np.count_nonzero(self.dropped))

    def for_token(self, *index: int) -> list[RoutingChoice]:
        return [
            RoutingChoice(
                rank=r + 1,
                expert=int(self.experts[index + (r,)]),
                gate=float(self.gates[index + (r,)]),
                position=int(self.positions[index + (r,)]),
                dropped=bool(self.dropped[index + (r,)]),
            )
            for r in range(self.top_k)
        ]

    def reshape(self, shape: tuple[int, ...]) -> "Choices":
        """Re-split the token axes; the trailing K axis is kept."""
        k = self.top_k
        return replace(
            self,
            experts=self.experts.reshape(shape + (k,)),
            gates=self.gates.reshape(shape + (k,)),
            positions=self.positions.reshape(shape + (k,)),
            dropped=self.dropped.reshape(shape + (k,)),
        )


@dataclass
class RoutingStats:
    f: np.ndarray
    p_mean: np.ndarray
    dropped_fraction: float
    load: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def max_load(self) -> int:
        return int(self.load.max()) if self.load.size else 0


@dataclass
class RoutingOutcome:
    probs: Tensor
    choices: Choices
    combine: Tensor
    dispatch: Tensor
    stats: RoutingStats
    capacity: int


# =============================================================================
# Capacity
# =============================================================================

def expert_capacity(tokens_per_group: int, cfg: RouterConfig, training: bool = True) -> int:
    """Per-expert, per-group slot count: ceil(C * K * S / E)."""
    if tokens_per_group < 1:
        raise RoutingError(f"tokens per group must be >= 1, got {tokens_per_group}")
    if cfg.capacity_override is not None:
        return cfg.capacity_override
    factor = cfg.capacity_factor
    if not training and cfg.eval_capacity_factor is not None:
        factor = cfg.eval_capacity_factor
    # Rounding first keeps exact quotients like 8.000000000000002 from ceiling up.
    return math.ceil(round(factor * cfg.top_k * tokens_per_group / cfg.num_experts, 9))


# =============================================================================
# Selection
# =============================================================================

def select_experts(
    probs: Tensor,
    cfg: RouterConfig,
    rng: np.random.Generator | None = None,
) -> Choices:
    """Ranked top-K choices per token; probs must end in dims ("s", "e")."""
    if probs.dims[-2:] != ("s", "e"):
        raise RoutingError(f"probs must end in dims ('s', 'e'), got {probs.dims}")
    p = probs.data
    num_experts = p.shape[-1]
    k = cfg.top_k
    if k > num_experts:
        raise RoutingError(f"top_k={k} exceeds the {num_experts} experts available")

    if cfg.second_choice_policy == "naive-second-best" or k == 1:
        experts = top_k_indices(p, -1, k)
    else:
        if rng is None:
            raise RoutingError("random-proportional routing needs a seeded generator")
        experts = _sample_proportional(p, k, rng)

    raw = np.take_along_axis(p, experts, axis=-1)
    gates = raw
    if cfg.normalize_gates:
        total = np.sum(raw, axis=-1, keepdims=True)
        gates = np.divide(raw, total, out=np.zeros_like(raw), where=total > 0)

    return Choices(
        num_experts=num_experts,
        experts=experts,
        gates=gates,
        positions=np.full(experts.shape, -1, dtype=np.int64),
        dropped=np.zeros(experts.shape, dtype=bool),
    )


def _sample_proportional(p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Rank 1 is the argmax; later ranks sample from the remaining mass."""
    best = top_k_indices(p, -1, k)
    experts = np.empty(p.shape[:-1] + (k,), dtype=np.int64)
    experts[..., 0] = best[..., 0]
    remaining = p.copy()
    np.put_along_axis(remaining, best[..., :1], 0.0, axis=-1)
    for r in range(1, k):
        cdf = np.cumsum(remaining, axis=-1)
        total = cdf[..., -1]
        u = rng.random(p.shape[:-1]) * total
        pick = np.minimum(np.sum(cdf <= u[..., None], axis=-1), p.shape[-1] - 1)
        # Fall back to the next-best expert when the remaining mass underflowed.
        picked_mass = np.take_along_axis(remaining, pick[..., None], axis=-1)[..., 0]
        fallback = top_k_indices(remaining, -1, 1)[..., 0]
        pick = np.where((total > 0) & (picked_mass > 0), pick, fallback)
        experts[..., r] = pick
        np.put_along_axis(remaining, pick[..., None], 0.0, axis=-1)
    return experts


def assign_capacity(choices: Choices, capacity: int) -> Choices:
    """Grant expert slots rank-major: every rank-1 choice in token order, then rank 2.

    A choice whose expert buffer is already full is dropped. A choice whose
    gate weight is 0 takes no slot and is not counted as dropped. Granted
    positions are dense 0..capacity-1 in grant order.
    """
    shape = choices.experts.shape
    s, k = shape[-2], shape[-1]
    e = choices.num_experts
    experts = choices.experts.reshape(-1, s, k)
    gates = choices.gates.reshape(-1, s, k)
    groups = experts.shape[0]

    positions = np.full(experts.shape, -1, dtype=np.int64)
    dropped = np.zeros(experts.shape, dtype=bool)
    used = np.zeros((groups, e), dtype=np.int64)
    slots = np.arange(e)
    for r in range(k):
        eligible = gates[:, :, r] > 0
        onehot = (experts[:, :, r, None] == slots) & eligible[:, :, None]
        before = np.cumsum(onehot, axis=1) - onehot + used[:, None, :]
        pos = np.take_along_axis(before, experts[:, :, r, None], axis=2)[:, :, 0]
        keep = eligible & (pos < capacity)
        positions[:, :, r] = np.where(keep, pos, -1)
        dropped[:, :, r] = eligible & ~keep
        used += np.sum(onehot, axis=1)

    return replace(
        choices,
        positions=positions.reshape(shape),
        dropped=dropped.reshape(shape),
    )


def split_groups(choices: Choices, outer_batches: int, groups: int) -> Choices:
    """Lay flat (N, K) or grouped choices out as (O, G, S, K)."""
    tokens = choices.tokens
    if tokens % (outer_batches * groups):
        raise RoutingError(
            f"cannot split {tokens} tokens into {outer_batches} outer batches x {groups} groups"
        )
    return choices.reshape((outer_batches, groups, tokens // (outer_batches * groups)))


def build_combine_dispatch(
    choices: Choices,
    capacity: int,
    outer_batches: int | None = None,
    groups: int | None = None,
) -> tuple[Tensor, Tensor]:
    """Scatter surviving choices into (O, G, S, E, C) combine and dispatch tensors.

    Choices already shaped (O, G, S, K) are used as is; anything else is
    re-split with `outer_batches` and `groups`. A zero capacity still gets a
    single (empty) slot so the tensors stay well-formed.
    """
    if outer_batches is not None or groups is not None or choices.experts.ndim != 4:
        choices = split_groups(choices, outer_batches or 1, groups or 1)
    o, g, s, _ = choices.experts.shape
    combine = np.zeros((o, g, s, choices.num_experts, max(capacity, 1)))
    oi, gi, si, ki = np.nonzero(choices.granted)
    combine[oi, gi, si, choices.experts[oi, gi, si, ki], choices.positions[oi, gi, si, ki]] = (
        choices.gates[oi, gi, si, ki]
    )
    dims = ("o", "g", "s", "e", "c")
    return Tensor.wrap(combine, dims), Tensor.wrap((combine > 0).astype(np.float64), dims)


# =============================================================================
# Statistics and auxiliary losses
# =============================================================================

def routing_stats(probs: Tensor, choices: Choices) -> RoutingStats:
    e = choices.num_experts
    p = probs.data.reshape(-1, e)
    rank1 = choices.experts[..., 0].ravel()
    granted = choices.experts[choices.granted]
    total_choices = choices.experts.size
    return RoutingStats(
        f=np.bincount(rank1, minlength=e) / rank1.size,
        p_mean=p.mean(axis=0),
        dropped_fraction=choices.dropped_count / total_choices if total_choices else 0.0,
        load=np.bincount(granted, minlength=e),
    )


def rank1_fraction(choices: Choices) -> Tensor:
    rank1 = choices.experts[..., 0].ravel()
    return Tensor.wrap(np.bincount(rank1, minlength=choices.num_experts) / rank1.size, ("e",))


def balance_loss_term(graph: GradGraph, probs: Var, choices: Choices) -> Var:
    """E * sum_e f_e * mean(p_e); f_e enters as a constant."""
    token_dims = [d for d in probs.dims if d != "e"]
    p_mean = graph.mean(probs, token_dims)
    f = graph.constant(rank1_fraction(choices))
    return graph.scale(graph.sum(graph.mul(p_mean, f)), choices.num_experts)


def z_loss_term(graph: GradGraph, logits: Var) -> Var:
    return graph.mean(graph.square(graph.logsumexp(logits, "e")))


def load_balance_loss(probs: Tensor, choices: Choices) -> float:
    graph = GradGraph()
    return balance_loss_term(graph, graph.constant(probs), choices).item()


def router_z_loss(logits: Tensor) -> float:
    graph = GradGraph()
    return z_loss_term(graph, graph.constant(logits)).item()


def selection_mask(choices: Choices, dims: tuple[str, ...]) -> Tensor:
    """1.0 at every selected (token, expert), dropped or not."""
    mask = np.zeros(choices.experts.shape[:-1] + (choices.num_experts,))
    np.put_along_axis(mask, choices.experts, 1.0, axis=-1)
    return Tensor.wrap(mask, dims)


def combine_weights(graph: GradGraph, probs: Var, outcome: RoutingOutcome, cfg: RouterConfig) -> Var:
    """Differentiable combine tensor: the dispatch mask times gate probabilities.

    Matches outcome.combine in value; gradients flow into `probs` only.
    """
    weights = graph.mul(graph.constant(outcome.dispatch), probs)
    if cfg.normalize_gates:
        picked = graph.mul(probs, graph.constant(selection_mask(outcome.choices, probs.dims)))
        weights = graph.div(weights, graph.sum(picked, ["e"]))
    return weights


# =============================================================================
# Pipeline
# =============================================================================

def route(
    logits: Tensor,
    cfg: RouterConfig,
    rng: np.random.Generator | None = None,
    training: bool = True,
    probs: Tensor | None = None,
) -> RoutingOutcome:
    """Run the whole routing pipeline on (O, G, S, E) or (G, S, E) logits."""
    if logits.dims[-2:] != ("s", "e"):
        raise RoutingError(f"logits must end in dims ('s', 'e'), got {logits.dims}")
    if logits.extent("e") != cfg.num_experts:
        raise RoutingError(
            f"logits have {logits.extent('e')} experts, config has {cfg.num_experts}"
        )
    if logits.rank == 3:
        logits = logits.reshape([("o", 1)] + list(logits.shape))
    if logits.dims != ("o", "g", "s", "e"):
        raise RoutingError(f"logits must be (o, g, s, e), got {logits.dims}")
    if probs is None:
        probs = softmax(logits, "e")
    elif probs.rank == 3:
        probs = probs.reshape([("o", 1)] + list(probs.shape))

    capacity = expert_capacity(logits.extent("s"), cfg, training)
    choices = assign_capacity(select_experts(probs, cfg, rng), capacity)
    combine, dispatch = build_combine_dispatch(choices, capacity)
    return RoutingOutcome(
        probs=probs,
        choices=choices,
        combine=combine,
        dispatch=dispatch,
        stats=routing_stats(probs, choices),
        capacity=capacity,
    )
