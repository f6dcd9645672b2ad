"""Decoder-only transformer with optional sparse MoE FFN layers.

Blocks are pre-norm: x += attn(rms_norm(x)); x += ffn(rms_norm(x)). Dense
layers use a SwiGLU FFN (w1, w3 gate, w2 out). MoE layers route tokens to
two-matrix SiLU experts through the grouped einsum sequence

    ogsm,me     -> ogse      router logits
    ogsec,ogsm  -> oegcm     dispatch
    oegcm,emh   -> oegch     expert in-projection, SiLU
    oegch,ehm   -> oegcm     expert out-projection
    ogsec,oegcm -> ogsm      combine

Parameter names:
    embed                            (v, m)   tied with the output projection
    layers.{i}.attn_norm             (m,)
    layers.{i}.wq / wk / wv          (m, n, d)
    layers.{i}.wo                    (n, d, m)
    layers.{i}.ffn_norm              (m,)
    layers.{i}.w1 / w3               (m, h)   dense layers
    layers.{i}.w2                    (h, m)   dense layers
    layers.{i}.router                (m, e)   MoE layers
    layers.{i}.expert_w1             (e, m, h)
    layers.{i}.expert_w2             (e, h, m)
    final_norm                       (m,)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .autograd import GradGraph, Var
from .routing import (
    RouterConfig,
    RoutingError,
    RoutingOutcome,
    balance_loss_term,
    combine_weights,
    expert_capacity,
    route,
    z_loss_term,
)
from .tensor import Tensor, rope_angles, rope_rotate, silu_array, softmax_array

INIT_STD = 0.02
MASK_VALUE = -1e9

_PLACEMENT = re.compile(r"^(every|last)-(\d+)$")


# =============================================================================
# Configuration
# =============================================================================

def parse_placement(placement: str) -> tuple[str, int]:
    """"none" -> ("none", 0); "every-4" -> ("every", 4); "last-2" -> ("last", 2)."""
    if placement == "none":
        return "none", 0
    match = _PLACEMENT.match(placement)
    if not match or int(match.group(2)) < 1:
        raise ValueError(f"moe_placement must be 'none', 'every-<k>' or 'last-<k>', got '{placement}'")
    return match.group(1), int(match.group(2))


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 32
    heads: int = 4
    ffn_hidden: int = 64
    vocab: int = 64
    seq_len: int = 32
    moe_placement: str = "none"
    router: RouterConfig = field(default_factory=RouterConfig)
    outer_batches: int = 1
    groups: int = 1
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("layers", "d_model", "heads", "ffn_hidden", "vocab", "seq_len", "outer_batches", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ValueError(f"head dimension {self.d_model // self.heads} must be even for rotary embeddings")
        kind, k = parse_placement(self.moe_placement)
        if kind != "none" and k > self.layers:
            raise ValueError(f"moe_placement '{self.moe_placement}' needs k <= layers={self.layers}")
        if self.rope_base <= 0 or self.norm_eps < 0:
            raise ValueError("rope_base must be > 0 and norm_eps >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def check_batch(self, batch_tokens: int) -> None:
        unit = self.outer_batches * self.groups * self.seq_len
        if batch_tokens % unit:
            raise ValueError(
                f"batch_tokens={batch_tokens} is not divisible by "
                f"outer_batches x groups x seq_len = {unit}"
            )


def moe_layer_indices(cfg: ModelConfig) -> list[int]:
    """0-based indices of the layers whose FFN is an MoE layer."""
    kind, k = parse_placement(cfg.moe_placement)
    if kind == "every":
        return [i for i in range(cfg.layers) if (i + 1) % k == 0]
    if kind == "last":
        return list(range(cfg.layers - k, cfg.layers))
    return []


# =============================================================================
# Parameters
# =============================================================================

@dataclass(frozen=True)
class ParamCount:
    total: int
    activated: int

    @property
    def inactive(self) -> int:
        return self.total - self.activated


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[str, int], ...]]:
    """Named shape of every parameter, in construction order."""
    m, n, d, h = cfg.d_model, cfg.heads, cfg.head_dim, cfg.ffn_hidden
    e = cfg.router.num_experts
    moe = set(moe_layer_indices(cfg))
    shapes: dict[str, tuple[tuple[str, int], ...]] = {"embed": (("v", cfg.vocab), ("m", m))}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (("m", m),)
        for w in ("wq", "wk", "wv"):
            shapes[p + w] = (("m", m), ("n", n), ("d", d))
        shapes[p + "wo"] = (("n", n), ("d", d), ("m", m))
        shapes[p + "ffn_norm"] = (("m", m),)
        if i in moe:
            shapes[p + "router"] = (("m", m), ("e", e))
            shapes[p + "expert_w1"] = (("e", e), ("m", m), ("h", h))
            shapes[p + "expert_w2"] = (("e", e), ("h", h), ("m", m))
        else:
            shapes[p + "w1"] = (("m", m), ("h", h))
            shapes[p + "w3"] = (("m", m), ("h", h))
            shapes[p + "w2"] = (("h", h), ("m", m))
    shapes["final_norm"] = (("m", m),)
    return shapes


def count_params(cfg: ModelConfig) -> ParamCount:
    """All weights vs. weights one token touches (K of E experts per MoE layer)."""
    e, k = cfg.router.num_experts, cfg.router.top_k
    total = activated = 0
    for name, shape in param_shapes(cfg).items():
        size = math.prod(n for _, n in shape)
        total += size
        activated += size // e * k if name.endswith(("expert_w1", "expert_w2")) else size
    return ParamCount(total=total, activated=activated)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, i: int) -> dict[str, Tensor]:
        """One layer's parameters with the "layers.{i}." prefix stripped."""
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        tensors = dict(self.tensors)
        for name, array in arrays.items():
            tensors[name] = Tensor(array, self.tensors[name].dims)
        return ModelParams(self.config, tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    z = rng.standard_normal(shape)
    outside = np.abs(z) > 2.0
    while outside.any():
        z[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(z) > 2.0
    return z * std


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: gains at 1, weights truncated-normal(0.02).

    Residual-output projections (wo, w2, expert_w2) are further scaled by
    1/sqrt(2L).
    """
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2 * cfg.layers)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        dims = tuple(d for d, _ in shape)
        extents = tuple(n for _, n in shape)
        if name.endswith("_norm"):
            array = np.ones(extents)
        else:
            array = _truncated_normal(rng, extents, INIT_STD)
            if name.endswith(("wo", ".w2", "expert_w2")):
                array *= out_scale
        tensors[name] = Tensor.wrap(array, dims)
    return ModelParams(cfg, tensors)


# =============================================================================
# Forward pass on a GradGraph
# =============================================================================

@dataclass
class MoEResult:
    y: Var
    balance: Var
    z: Var
    outcome: RoutingOutcome


@dataclass
class ModelOutput:
    logits: Var
    balance: Var | None
    z: Var | None
    outcomes: dict[int, RoutingOutcome]


def leaves_from_params(graph: GradGraph, params: ModelParams) -> dict[str, Var]:
    return {name: graph.leaf(name, tensor) for name, tensor in params.items()}


def _to_groups(graph: GradGraph, x: Var, cfg: ModelConfig) -> Var:
    if x.dims == ("o", "g", "s", "m"):
        return x
    tokens = x.extent("b") * x.extent("t")
    o, g = cfg.outer_batches, cfg.groups
    if tokens % (o * g):
        raise RoutingError(f"cannot split {tokens} tokens into {o} outer batches x {g} groups")
    return graph.reshape(x, [("o", o), ("g", g), ("s", tokens // (o * g)), ("m", x.extent("m"))])


def moe_ffn_graph(
    graph: GradGraph,
    x: Var,
    layer: Mapping[str, Var],
    cfg: ModelConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> MoEResult:
    """MoE FFN on (b, t, m) or (o, g, s, m) activations; y has x's dims."""
    xg = _to_groups(graph, x, cfg)
    logits = graph.einsum("ogsm,me->ogse", xg, layer["router"])
    probs = graph.softmax(logits, "e")
    outcome = route(logits.value, cfg.router, rng, training, probs=probs.value)

    combine = combine_weights(graph, probs, outcome, cfg.router)
    dispatch = graph.constant(outcome.dispatch)
    dispatched = graph.einsum("ogsec,ogsm->oegcm", dispatch, xg)
    hidden = graph.silu(graph.einsum("oegcm,emh->oegch", dispatched, layer["expert_w1"]))
    expert_out = graph.einsum("oegch,ehm->oegcm", hidden, layer["expert_w2"])
    y = graph.einsum("ogsec,oegcm->ogsm", combine, expert_out)
    if x.dims != y.dims:
        y = graph.reshape(y, x.value.shape)
    return MoEResult(
        y=y,
        balance=balance_loss_term(graph, probs, outcome.choices),
        z=z_loss_term(graph, logits),
        outcome=outcome,
    )


def dense_ffn(graph: GradGraph, x: Var, layer: Mapping[str, Var]) -> Var:
    gate = graph.silu(graph.einsum("btm,mh->bth", x, layer["w1"]))
    up = graph.einsum("btm,mh->bth", x, layer["w3"])
    return graph.einsum("bth,hm->btm", graph.mul(gate, up), layer["w2"])


def causal_mask(length: int) -> Tensor:
    mask = np.triu(np.full((length, length), MASK_VALUE), k=1)
    return Tensor.wrap(mask, ("t", "s"))


def attention(graph: GradGraph, x: Var, layer: Mapping[str, Var], cfg: ModelConfig) -> Var:
    length = x.extent("t")
    positions = range(length)
    q = graph.rope(graph.einsum("btm,mnd->btnd", x, layer["wq"]), positions, cfg.rope_base)
    k = graph.rope(graph.einsum("btm,mnd->btnd", x, layer["wk"]), positions, cfg.rope_base)
    v = graph.einsum("btm,mnd->btnd", x, layer["wv"])
    scores = graph.scale(graph.einsum("btnd,bsnd->bnts", q, k), 1.0 / math.sqrt(cfg.head_dim))
    scores = graph.add(scores, graph.constant(causal_mask(length)))
    weights = graph.softmax(scores, "s")
    context = graph.einsum("bnts,bsnd->btnd", weights, v)
    return graph.einsum("btnd,ndm->btm", context, layer["wo"])


def block_forward(
    graph: GradGraph,
    x: Var,
    layer: Mapping[str, Var],
    kind: str,
    cfg: ModelConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Var, MoEResult | None]:
    """One pre-norm block. Tokens dropped by the router pass through on the residual."""
    if kind not in ("dense", "moe"):
        raise ValueError(f"block kind must be 'dense' or 'moe', got '{kind}'")
    x = graph.add(x, attention(graph, graph.rms_norm(x, layer["attn_norm"], cfg.norm_eps), layer, cfg))
    normed = graph.rms_norm(x, layer["ffn_norm"], cfg.norm_eps)
    if kind == "dense":
        return graph.add(x, dense_ffn(graph, normed, layer)), None
    result = moe_ffn_graph(graph, normed, layer, cfg, training, rng)
    return graph.add(x, result.y), result


def forward(
    graph: GradGraph,
    leaves: Mapping[str, Var],
    tokens: np.ndarray,
    cfg: ModelConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> ModelOutput:
    """Logits (b, t, v) for integer tokens (b, t); aux losses averaged over MoE layers."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, time), got shape {tokens.shape}")
    moe = set(moe_layer_indices(cfg))
    x = graph.take(leaves["embed"], tokens, ("b", "t"))
    balances, zs, outcomes = [], [], {}
    for i in range(cfg.layers):
        prefix = f"layers.{i}."
        layer = {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}
        x, result = block_forward(graph, x, layer, "moe" if i in moe else "dense", cfg, training, rng)
        if result is not None:
            balances.append(result.balance)
            zs.append(result.z)
            outcomes[i] = result.outcome
    x = graph.rms_norm(x, leaves["final_norm"], cfg.norm_eps)
    logits = graph.einsum("btm,vm->btv", x, leaves["embed"])
    return ModelOutput(
        logits=logits,
        balance=_average(graph, balances),
        z=_average(graph, zs),
        outcomes=outcomes,
    )


def _average(graph: GradGraph, terms: list[Var]) -> Var | None:
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = graph.add(total, term)
    return graph.scale(total, 1.0 / len(terms))


@dataclass
class LossTerms:
    total: Var
    cross_entropy: Var
    balance: Var | None
    z: Var | None


def lm_loss(
    graph: GradGraph,
    logits: Var,
    targets: np.ndarray,
    balance: Var | None,
    z: Var | None,
    cfg: ModelConfig,
) -> LossTerms:
    """Mean next-token cross-entropy plus balance_coef * balance + z_coef * z."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != tuple(n for d, n in logits.value.shape if d != "v"):
        raise ValueError(f"targets of shape {targets.shape} do not match logits {logits.value.shape}")
    log_probs = graph.log_softmax(logits, "v")
    ce = graph.scale(graph.mean(graph.pick(log_probs, targets, "v")), -1.0)
    total = ce
    if balance is not None and cfg.router.balance_coef:
        total = graph.add(total, graph.scale(balance, cfg.router.balance_coef))
    if z is not None and cfg.router.z_coef:
        total = graph.add(total, graph.scale(z, cfg.router.z_coef))
    return LossTerms(total=total, cross_entropy=ce, balance=balance, z=z)


# =============================================================================
# Tensor-level entry points
# =============================================================================

def moe_ffn_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """MoE FFN on an (o, g, s, m) tensor with one layer's router and expert weights."""
    if x.dims != ("o", "g", "s", "m"):
        raise ValueError(f"x must have dims (o, g, s, m), got {x.dims}")
    graph = GradGraph()
    layer = {k: graph.constant(params[k]) for k in ("router", "expert_w1", "expert_w2")}
    result = moe_ffn_graph(graph, graph.constant(x), layer, cfg, training, rng)
    return result.y.value, {"balance": result.balance.item(), "z": result.z.item()}


def moe_ffn_oracle(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, training: bool = True) -> Tensor:
    """Per-token reference for moe_ffn_forward under the naive second-choice policy."""
    rcfg = cfg.router
    if rcfg.second_choice_policy != "naive-second-best":
        raise RoutingError("the per-token oracle only follows the naive second-best policy")
    xs = x.data
    router = params["router"].data
    w1, w2 = params["expert_w1"].data, params["expert_w2"].data
    n_outer, n_groups, n_tokens, width = xs.shape
    n_experts = router.shape[1]
    capacity = expert_capacity(n_tokens, rcfg, training)
    y = np.zeros_like(xs)

    for o in range(n_outer):
        for g in range(n_groups):
            picks = []
            for s in range(n_tokens):
                logits = np.array([sum(xs[o, g, s, i] * router[i, e] for i in range(width)) for e in range(n_experts)])
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                ranked = sorted(range(n_experts), key=lambda e: (-probs[e], e))[: rcfg.top_k]
                denom = sum(probs[e] for e in ranked) if rcfg.normalize_gates else 1.0
                picks.append([(e, probs[e] / denom) for e in ranked])

            used = [0] * n_experts
            for rank in range(rcfg.top_k):
                for s in range(n_tokens):
                    expert, gate = picks[s][rank]
                    if gate <= 0 or used[expert] >= capacity:
                        continue
                    used[expert] += 1
                    hidden = silu_array(xs[o, g, s] @ w1[expert])
                    y[o, g, s] += gate * (hidden @ w2[expert])
    return Tensor.wrap(y, x.dims)


def two_matrix_ffn(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """silu(x @ w1) @ w2 over the trailing "m" axis."""
    hidden = silu_array(np.tensordot(x.data, w1.data, axes=([x.rank - 1], [0])))
    return Tensor.wrap(np.tensordot(hidden, w2.data, axes=([hidden.ndim - 1], [0])), x.dims)


def model_logits(
    params: ModelParams,
    tokens: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    graph = GradGraph()
    leaves = {name: graph.constant(t) for name, t in params.items()}
    return forward(graph, leaves, tokens, params.config, training, rng).logits.value


def evaluate_loss(
    params: ModelParams,
    tokens: np.ndarray,
    targets: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Forward-only loss breakdown: total, cross_entropy, balance, z, dropped_fraction.

    Random-proportional routing draws its later ranks from `rng`.
    """
    cfg = params.config
    graph = GradGraph()
    leaves = {name: graph.constant(t) for name, t in params.items()}
    out = forward(graph, leaves, tokens, cfg, training, rng)
    terms = lm_loss(graph, out.logits, targets, out.balance, out.z, cfg)
    return {
        "total": terms.total.item(),
        "cross_entropy": terms.cross_entropy.item(),
        "balance": terms.balance.item() if terms.balance is not None else 0.0,
        "z": terms.z.item() if terms.z is not None else 0.0,
        "dropped_fraction": mean_dropped_fraction(out.outcomes),
    }


def mean_dropped_fraction(outcomes: Mapping[int, RoutingOutcome]) -> float:
    if not outcomes:
        return 0.0
    return float(np.mean([o.stats.dropped_fraction for o in outcomes.values()]))


def attention_weights(params: ModelParams, tokens: np.ndarray, layer: int = 0) -> np.ndarray:
    """Softmax attention weights (b, n, t, s) of one layer, for inspection."""
    cfg = params.config
    graph = GradGraph()
    leaves = {name: graph.constant(t) for name, t in params.items()}
    x = graph.take(leaves["embed"], np.asarray(tokens, dtype=np.int64), ("b", "t"))
    moe = set(moe_layer_indices(cfg))
    for i in range(layer):
        prefix = f"layers.{i}."
        lp = {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}
        x, _ = block_forward(graph, x, lp, "moe" if i in moe else "dense", cfg, training=False)
    prefix = f"layers.{layer}."
    lp = {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}
    normed = graph.rms_norm(x, lp["attn_norm"], cfg.norm_eps).value.data
    q = np.einsum("btm,mnd->btnd", normed, lp["wq"].value.data)
    k = np.einsum("btm,mnd->btnd", normed, lp["wk"].value.data)
    angles = rope_angles(range(normed.shape[1]), cfg.head_dim, cfg.rope_base)
    q, k = rope_rotate(q, angles, 1, 3), rope_rotate(k, angles, 1, 3)
    scores = np.einsum("btnd,bsnd->bnts", q, k) / math.sqrt(cfg.head_dim)
    scores = scores + causal_mask(normed.shape[1]).data
    return softmax_array(scores, -1)
