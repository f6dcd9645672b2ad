"""Analytical simulator for a (Data, Expert, Model) device mesh.

Every tensor of the MoE transformer gets a ShardingSpec: for each of its
dimensions, the mesh axes that split it. From the specs the simulator
derives per-device shard shapes, per-device memory, the collective
communication schedule of one training step and an alpha-beta step-time
estimate.

Axis roles under the 3d strategy:
    Data    pure data parallelism across slices; weights replicated; DCN
    Expert  expert placement in MoE layers, FSDP for dense weights; ICI
    Model   heads / hidden-dim tensor parallelism; ICI

Strategies:
    3d         (devices / E, E, 1); groups and experts on Expert, outer
               batches on Data
    padded-2d  (devices, 1, 1); expert count padded up to the device count
               and sharded on Data only, so every device ships capacity
               buffers for experts that never get a token
    naive-2d   (E, 1, devices / E); the expert dimension is sharded jointly
               over (Data, Model). With fewer experts than devices each
               expert is cut along its hidden width into devices / E
               slices, and the slices' outputs are summed over Model

Both 2D meshes sit inside one slice, so their Data-axis collectives run
over ICI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import ModelConfig, count_params, moe_layer_indices
from .routing import RoutingOutcome, expert_capacity

STRATEGIES = ("3d", "naive-2d", "padded-2d")
COLLECTIVES = ("all2all", "allreduce", "allgather", "reduce-scatter")
LINKS = ("ici", "dcn")


class ShardingError(ValueError):
    """Indivisible dimension, reused mesh axis or inconsistent layout."""


class MeshAxis(str, Enum):
    DATA = "data"
    EXPERT = "expert"
    MODEL = "model"

    @property
    def label(self) -> str:
        return self.value.capitalize()


# =============================================================================
# Mesh, specs, profile
# =============================================================================

@dataclass(frozen=True)
class MeshSpec:
    data: int = 1
    expert: int = 1
    model: int = 1

    def __post_init__(self):
        for axis in MeshAxis:
            if self.size(axis) < 1:
                raise ValueError(f"mesh axis {axis.value} must be >= 1, got {self.size(axis)}")

    @classmethod
    def parse(cls, text: str) -> "MeshSpec":
        """"4,64,1" -> MeshSpec(data=4, expert=64, model=1)."""
        parts = [p.strip() for p in text.strip("()").split(",")]
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"mesh must be three comma-separated integers D,E,M, got '{text}'")
        return cls(*(int(p) for p in parts))

    @property
    def devices(self) -> int:
        return self.data * self.expert * self.model

    def size(self, axis: MeshAxis) -> int:
        return getattr(self, axis.value)

    def __str__(self) -> str:
        return f"({self.data}, {self.expert}, {self.model})"


@dataclass(frozen=True)
class ShardingSpec:
    """Per-dimension mesh axes; an empty tuple leaves the dimension unsharded."""

    dims: tuple[tuple[MeshAxis, ...], ...]

    def __post_init__(self):
        used = [a for axes in self.dims for a in axes]
        if len(used) != len(set(used)):
            raise ShardingError(f"mesh axis used more than once in {self}")

    @classmethod
    def of(cls, *entries: MeshAxis | Sequence[MeshAxis] | None) -> "ShardingSpec":
        dims = []
        for entry in entries:
            if entry is None:
                dims.append(())
            elif isinstance(entry, MeshAxis):
                dims.append((entry,))
            else:
                dims.append(tuple(entry))
        return cls(tuple(dims))

    @property
    def rank(self) -> int:
        return len(self.dims)

    def uses(self, axis: MeshAxis) -> bool:
        return any(axis in axes for axes in self.dims)

    def without(self, axis: MeshAxis) -> "ShardingSpec":
        return ShardingSpec(tuple(tuple(a for a in axes if a != axis) for axes in self.dims))

    def __str__(self) -> str:
        parts = []
        for axes in self.dims:
            if not axes:
                parts.append("None")
            elif len(axes) == 1:
                parts.append(axes[0].label)
            else:
                parts.append("(" + ", ".join(a.label for a in axes) + ")")
        return "(" + ", ".join(parts) + ")"


@dataclass(frozen=True)
class DeviceProfile:
    peak_flops: float = 1.97e14
    mfu: float = 0.5
    ici_bandwidth: float = 1e11
    dcn_bandwidth: float = 5e10
    link_latency: float = 1e-5
    mem_capacity: float = 16e9
    bytes_per_value: int = 2

    def __post_init__(self):
        for name in ("peak_flops", "ici_bandwidth", "dcn_bandwidth", "link_latency", "mem_capacity", "bytes_per_value"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.mfu <= 1:
            raise ValueError(f"mfu must be in (0, 1], got {self.mfu}")

    def bandwidth(self, link: str) -> float:
        if link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got '{link}'")
        return self.dcn_bandwidth if link == "dcn" else self.ici_bandwidth


def shard_shape(
    global_shape: Sequence[int],
    spec: ShardingSpec,
    mesh: MeshSpec,
    names: Sequence[str] | None = None,
) -> tuple[int, ...]:
    """Per-device extents: each dimension divided by the product of its axes."""
    if len(global_shape) != spec.rank:
        raise ShardingError(f"spec {spec} has {spec.rank} dims, shape {tuple(global_shape)} has {len(global_shape)}")
    out = []
    for i, (extent, axes) in enumerate(zip(global_shape, spec.dims)):
        parts = math.prod(mesh.size(a) for a in axes)
        if extent % parts:
            label = names[i] if names else f"dim {i}"
            raise ShardingError(
                f"dimension {label} of extent {extent} is not divisible by "
                f"{' x '.join(a.label for a in axes)} = {parts}"
            )
        out.append(extent // parts)
    return tuple(out)


# =============================================================================
# Tensor table
# =============================================================================

D, X, M = MeshAxis.DATA, MeshAxis.EXPERT, MeshAxis.MODEL


@dataclass(frozen=True)
class TensorDef:
    name: str
    kind: str
    dims: str


# Dimension letters: o outer batch, g group, s tokens/group, e experts (or expert
# slices), u router outputs, c capacity,
# m model width, h FFN hidden, n hidden width of one expert slice (h unless
# naive-2d cuts experts), b sequences, t sequence length, v vocab,
# a = 4m (q, k, v, o projections), f = 2h (gated FFN in-projections), r norm gains.
TENSORS: dict[str, TensorDef] = {
    t.name: t
    for t in (
        TensorDef("attention", "dense weights", "ma"),
        TensorDef("ffn1_weights", "dense weights", "mf"),
        TensorDef("ffn2_weights", "dense weights", "hm"),
        TensorDef("ffn1_activation", "dense activation", "bth"),
        TensorDef("ffn2_activation", "dense activation", "btm"),
        TensorDef("router", "MoE weights", "mu"),
        TensorDef("moe_ffn1", "MoE weights", "emn"),
        TensorDef("moe_ffn2", "MoE weights", "enm"),
        TensorDef("ogsm", "MoE activation", "ogsm"),
        TensorDef("ogsec", "MoE activation", "ogsuc"),
        TensorDef("oegcm", "MoE activation", "oegcm"),
        TensorDef("ogecm", "MoE activation", "ogucm"),
        TensorDef("oegch", "MoE activation", "oegcn"),
        TensorDef("embedding", "replicated weights", "vm"),
        TensorDef("norms", "replicated weights", "rm"),
        TensorDef("residual", "dense activation", "btm"),
    )
}

_3D_SPECS: dict[str, ShardingSpec] = {
    "attention": ShardingSpec.of(X, M),
    "ffn1_weights": ShardingSpec.of(X, M),
    "ffn2_weights": ShardingSpec.of(M, X),
    "ffn1_activation": ShardingSpec.of((D, X), None, M),
    "ffn2_activation": ShardingSpec.of((D, X), None, M),
    "router": ShardingSpec.of(None, None),
    "moe_ffn1": ShardingSpec.of(X, None, M),
    "moe_ffn2": ShardingSpec.of(X, M, None),
    "ogsm": ShardingSpec.of(D, X, None, M),
    "ogsec": ShardingSpec.of(D, X, None, None, None),
    "oegcm": ShardingSpec.of(D, X, None, None, M),
    "ogecm": ShardingSpec.of(D, X, None, None, M),
    "oegch": ShardingSpec.of(D, X, None, None, M),
    "embedding": ShardingSpec.of(None, None),
    "norms": ShardingSpec.of(None, None),
    "residual": ShardingSpec.of((D, X), None, None),
}

# One slice, no Expert axis: Data carries groups, experts and FSDP.
_PADDED_SPECS: dict[str, ShardingSpec] = {
    "attention": ShardingSpec.of(D, M),
    "ffn1_weights": ShardingSpec.of(D, M),
    "ffn2_weights": ShardingSpec.of(M, D),
    "ffn1_activation": ShardingSpec.of(D, None, M),
    "ffn2_activation": ShardingSpec.of(D, None, M),
    "router": ShardingSpec.of(None, None),
    "moe_ffn1": ShardingSpec.of(D, None, M),
    "moe_ffn2": ShardingSpec.of(D, M, None),
    "ogsm": ShardingSpec.of(None, D, None, M),
    "ogsec": ShardingSpec.of(None, D, None, None, None),
    "oegcm": ShardingSpec.of(None, D, None, None, M),
    "ogecm": ShardingSpec.of(None, D, None, None, M),
    "oegch": ShardingSpec.of(None, D, None, None, M),
    "embedding": ShardingSpec.of(None, None),
    "norms": ShardingSpec.of(None, None),
    "residual": ShardingSpec.of(D, None, None),
}

# Expert slices take the Model axis too, so MoE activations leave m whole.
_NAIVE_SPECS: dict[str, ShardingSpec] = {
    **_PADDED_SPECS,
    "moe_ffn1": ShardingSpec.of((D, M), None, None),
    "moe_ffn2": ShardingSpec.of((D, M), None, None),
    "ogsm": ShardingSpec.of(None, D, None, None),
    "oegcm": ShardingSpec.of(None, (D, M), None, None, None),
    "ogecm": ShardingSpec.of(None, D, None, None, None),
    "oegch": ShardingSpec.of(None, (D, M), None, None, None),
}

_STRATEGY_SPECS = {"3d": _3D_SPECS, "padded-2d": _PADDED_SPECS, "naive-2d": _NAIVE_SPECS}

# The axis that holds token groups, experts and dense-weight FSDP.
PLACEMENT_AXIS = {"3d": X, "padded-2d": D, "naive-2d": D}


class SpecTable(dict):
    """tensor name -> ShardingSpec, tagged with the strategy that produced it."""

    def __init__(self, strategy: str, specs: Mapping[str, ShardingSpec]):
        super().__init__(specs)
        self.strategy = strategy


def _check_strategy(strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got '{strategy}'")


def default_specs(strategy: str) -> SpecTable:
    _check_strategy(strategy)
    return SpecTable(strategy, _STRATEGY_SPECS[strategy])


def padded_experts(num_experts: int, devices: int) -> int:
    """Expert count rounded up to a multiple of the device count."""
    return -(-num_experts // devices) * devices


def expert_split(cfg: ModelConfig, mesh: MeshSpec, strategy: str) -> int:
    """Slices per expert: naive-2d cuts each expert along its hidden width
    until the expert dimension covers Data x Model; every other layout keeps
    experts whole.
    """
    if strategy != "naive-2d":
        return 1
    experts, parts = cfg.router.num_experts, mesh.data * mesh.model
    if experts % parts == 0:
        return 1
    if parts % experts:
        raise ShardingError(f"{experts} experts neither fill nor divide data x model = {parts} devices")
    split = parts // experts
    if cfg.ffn_hidden % split:
        raise ShardingError(f"ffn_hidden={cfg.ffn_hidden} cannot be cut into {split} expert slices")
    return split


def align_to_mesh(cfg: ModelConfig, mesh: MeshSpec, strategy: str = "3d") -> ModelConfig:
    """Groups follow the placement axis; 3d puts outer batches on Data."""
    _check_strategy(strategy)
    if strategy == "3d":
        return replace(cfg, outer_batches=mesh.data, groups=mesh.expert)
    return replace(cfg, outer_batches=1, groups=mesh.data)


def global_extents(
    cfg: ModelConfig,
    mesh: MeshSpec,
    batch_tokens: int,
    strategy: str = "3d",
) -> dict[str, int]:
    if batch_tokens % cfg.seq_len:
        raise ShardingError(f"batch_tokens={batch_tokens} is not a multiple of seq_len={cfg.seq_len}")
    groups = cfg.outer_batches * cfg.groups
    if batch_tokens % groups:
        raise ShardingError(f"batch_tokens={batch_tokens} is not divisible into {groups} outer batches x groups")
    experts = cfg.router.num_experts
    routed = padded_experts(experts, mesh.devices) if strategy == "padded-2d" else experts
    split = expert_split(cfg, mesh, strategy)
    s = batch_tokens // groups
    return {
        "o": cfg.outer_batches,
        "g": cfg.groups,
        "s": s,
        "e": routed * split,
        "u": routed,
        # slots per real expert; padding adds buffers, not room
        "c": max(expert_capacity(s, cfg.router), 1),
        "m": cfg.d_model,
        "h": cfg.ffn_hidden,
        "n": cfg.ffn_hidden // split,
        "b": batch_tokens // cfg.seq_len,
        "t": cfg.seq_len,
        "v": cfg.vocab,
        "a": 4 * cfg.d_model,
        "f": 2 * cfg.ffn_hidden,
        "r": 2 * cfg.layers + 1,
    }


def tensor_shape(name: str, extents: Mapping[str, int]) -> tuple[int, ...]:
    return tuple(extents[c] for c in TENSORS[name].dims)


def tensor_shard(name: str, extents: Mapping[str, int], specs: Mapping[str, ShardingSpec], mesh: MeshSpec) -> tuple[int, ...]:
    dims = TENSORS[name].dims
    return shard_shape(tensor_shape(name, extents), specs[name], mesh, [f"{name}.{c.upper()}" for c in dims])


def _layer_weights(kind: str) -> tuple[str, ...]:
    return ("attention", "router", "moe_ffn1", "moe_ffn2") if kind == "moe" else ("attention", "ffn1_weights", "ffn2_weights")


def layer_kinds(cfg: ModelConfig) -> list[str]:
    moe = set(moe_layer_indices(cfg))
    return ["moe" if i in moe else "dense" for i in range(cfg.layers)]


# =============================================================================
# Communication schedule
# =============================================================================

@dataclass(frozen=True)
class CommEvent:
    kind: str
    axis: MeshAxis
    bytes_per_device: float
    phase: str
    tensor: str
    layer: int | None = None
    axis_size: int = 1
    link: str = ""

    def __post_init__(self):
        if self.kind not in COLLECTIVES:
            raise ValueError(f"unknown collective '{self.kind}'")
        if self.bytes_per_device < 0:
            raise ValueError("bytes_per_device must be >= 0")
        if not self.link:
            object.__setattr__(self, "link", "dcn" if self.axis is MeshAxis.DATA else "ici")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got '{self.link}'")

    @property
    def cross_device_bytes(self) -> float:
        """Share of the payload that leaves the device: bytes * (P - 1) / P."""
        return self.bytes_per_device * (self.axis_size - 1) / self.axis_size

    def cost(self, profile: DeviceProfile) -> float:
        """Ring alpha-beta cost; allreduce moves the payload twice."""
        factor = 2.0 if self.kind == "allreduce" else 1.0
        return profile.link_latency + factor * self.cross_device_bytes / profile.bandwidth(self.link)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "axis": self.axis.value,
            "axis_size": self.axis_size,
            "link": self.link,
            "bytes_per_device": self.bytes_per_device,
            "phase": self.phase,
            "tensor": self.tensor,
            "layer": self.layer,
        }


# Contractions inside the expert MLP: (activation in, weights, activation out, contracted dim).
_EXPERT_MATMULS = (("oegcm", "moe_ffn1", "oegch", "m"), ("oegch", "moe_ffn2", "oegcm", "n"))


def plan_step(
    cfg: ModelConfig,
    mesh: MeshSpec,
    specs: Mapping[str, ShardingSpec],
    batch_tokens: int,
    bytes_per_value: int = 2,
) -> list[CommEvent]:
    """Collectives of one forward + backward step, in issue order per layer."""
    strategy = getattr(specs, "strategy", "3d")
    extents = global_extents(cfg, mesh, batch_tokens, strategy)
    place = PLACEMENT_AXIS[strategy]
    p_size, m_size, d_size = mesh.size(place), mesh.model, mesh.data
    sliced = extents["e"] > extents["u"]
    events: list[CommEvent] = []

    def values(name: str, spec: ShardingSpec | None = None) -> int:
        dims = TENSORS[name].dims
        return math.prod(shard_shape(
            tensor_shape(name, extents), spec or specs[name], mesh, [f"{name}.{c.upper()}" for c in dims]
        ))

    def emit(kind: str, axis: MeshAxis, n_values: float, phase: str, tensor: str, layer: int | None):
        link = "dcn" if axis is D and strategy == "3d" else "ici"
        events.append(CommEvent(kind, axis, float(n_values * bytes_per_value), phase, tensor, layer, mesh.size(axis), link))

    for layer, kind in enumerate(layer_kinds(cfg)):
        weights = _layer_weights(kind)

        if p_size > 1:
            for name in weights:
                if TENSORS[name].kind == "dense weights" and specs[name].uses(place):
                    gathered = values(name) * p_size
                    emit("allgather", place, gathered, "forward", name, layer)
                    emit("allgather", place, gathered, "backward", name, layer)
                    emit("reduce-scatter", place, gathered, "backward", name, layer)

        if m_size > 1:
            residual = values("residual")
            emit("allreduce", M, residual, "forward", "residual", layer)
            emit("allreduce", M, residual, "backward", "residual", layer)
            if kind == "dense":
                emit("allreduce", M, residual, "forward", "residual", layer)
                emit("allreduce", M, residual, "backward", "residual", layer)

        if kind == "moe":
            if p_size > 1:
                slots = values("oegcm")
                emit("all2all", place, slots, "forward", "oegcm", layer)
                emit("all2all", place, values("ogecm"), "forward", "ogecm", layer)
                emit("all2all", place, values("ogecm"), "backward", "ogecm", layer)
                emit("all2all", place, slots, "backward", "oegcm", layer)
            if m_size > 1:
                for _, weight, out, contracted in _EXPERT_MATMULS:
                    dim = TENSORS[weight].dims.index(contracted)
                    if M in specs[weight].dims[dim]:
                        partial = values(out, specs[out].without(M))
                        emit("allreduce", M, partial, "forward", out, layer)
                        emit("allreduce", M, partial, "backward", out, layer)
                if sliced:
                    # slices of one expert sit along Model; each holds a partial output
                    emit("allreduce", M, values("oegcm"), "forward", "oegcm", layer)
                    emit("allreduce", M, values("oegcm"), "backward", "oegcm", layer)

    # Gradient synchronisation of weights the placement axis replicates.
    replicated = ["embedding", "norms"] + [
        "router" for kind in layer_kinds(cfg) if kind == "moe"
    ]
    if p_size > 1:
        for name in replicated:
            emit("allreduce", place, values(name), "backward", name, None)

    if place is not D and d_size > 1:
        for layer, kind in enumerate(layer_kinds(cfg)):
            for name in _layer_weights(kind):
                emit("allreduce", D, values(name), "backward", name, layer)
        emit("allreduce", D, values("embedding"), "backward", "embedding", None)
        emit("allreduce", D, values("norms"), "backward", "norms", None)

    return events


def _expert_row(strategy: str, mesh: MeshSpec, slices: int, index: int) -> int:
    """Placement-axis coordinate of expert slice `index` out of `slices`."""
    if strategy == "naive-2d":
        device = index // (slices // (mesh.data * mesh.model))
        return device // mesh.model
    return index // (slices // mesh.size(PLACEMENT_AXIS[strategy]))


def brute_force_comm(
    cfg: ModelConfig,
    mesh: MeshSpec,
    outcome: RoutingOutcome,
    bytes_per_value: int = 2,
    strategy: str = "3d",
    filled_only: bool = False,
) -> float:
    """Cross-device dispatch bytes per device, counted slot by slot.

    Every capacity slot (o, g, expert, c) of the dispatch buffers is shipped,
    filled or not, to each slice of its expert. A slot crosses devices when
    its group's placement-axis shard differs from the slice's. With
    `filled_only` only slots holding a granted choice are counted.
    """
    choices = outcome.choices
    n_outer, n_groups, n_tokens, _ = choices.experts.shape
    outer_parts = mesh.data if strategy == "3d" else 1
    shaped = replace(cfg, outer_batches=n_outer, groups=n_groups)
    extents = global_extents(shaped, mesh, n_outer * n_groups * n_tokens, strategy)
    place = mesh.size(PLACEMENT_AXIS[strategy])
    slices, routed = extents["e"], extents["u"]
    split = slices // routed
    slice_parts = mesh.data * mesh.model if strategy == "naive-2d" else place
    if n_outer % outer_parts or n_groups % place or slices % slice_parts or choices.num_experts > routed:
        raise ShardingError(
            f"outcome (O={n_outer}, G={n_groups}, E={choices.num_experts}) does not tile mesh {mesh}"
        )
    groups_per_shard = n_groups // place
    capacity = outcome.combine.extent("c")
    rows = [[_expert_row(strategy, mesh, slices, e * split + j) for j in range(split)] for e in range(routed)]

    crossing = 0
    if filled_only:
        granted = choices.granted
        for o, g, s, r in zip(*np.nonzero(granted)):
            source = g // groups_per_shard
            crossing += sum(row != source for row in rows[choices.experts[o, g, s, r]])
    else:
        for o in range(n_outer):
            for g in range(n_groups):
                source = g // groups_per_shard
                for e in range(routed):
                    crossing += capacity * sum(row != source for row in rows[e])
    return crossing * cfg.d_model * bytes_per_value / mesh.devices


# =============================================================================
# Memory and step time
# =============================================================================

WEIGHT_GROUPS = {
    "attention": "dense",
    "ffn1_weights": "dense",
    "ffn2_weights": "dense",
    "router": "router",
    "moe_ffn1": "expert",
    "moe_ffn2": "expert",
    "embedding": "embedding",
    "norms": "embedding",
}

_ACTIVATIONS = {
    "dense": ("ffn1_activation", "ffn2_activation"),
    "moe": ("ogsm", "ogsec", "oegcm", "ogecm", "oegch"),
}


@dataclass
class MemoryEstimate:
    weight_bytes: float
    optimizer_bytes: float
    activation_bytes: float
    by_group: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.weight_bytes + self.optimizer_bytes + self.activation_bytes


def memory_per_device(
    cfg: ModelConfig,
    mesh: MeshSpec,
    specs: Mapping[str, ShardingSpec],
    optimizer_multiplier: float = 2.0,
    batch_tokens: int | None = None,
    bytes_per_value: int = 2,
) -> MemoryEstimate:
    """Weights x (1 + optimizer_multiplier) plus the largest single layer's activations."""
    strategy = getattr(specs, "strategy", "3d")
    batch_tokens = batch_tokens or cfg.seq_len * cfg.outer_batches * cfg.groups
    extents = global_extents(cfg, mesh, batch_tokens, strategy)
    by_group: dict[str, float] = {}

    def shard_bytes(name: str) -> float:
        return math.prod(tensor_shard(name, extents, specs, mesh)) * bytes_per_value

    weights = ["embedding", "norms"]
    for kind in layer_kinds(cfg):
        weights.extend(_layer_weights(kind))
    for name in weights:
        group = WEIGHT_GROUPS[name]
        by_group[group] = by_group.get(group, 0.0) + shard_bytes(name)
    weight_bytes = sum(by_group.values())

    activation = max(
        (sum(shard_bytes(n) for n in _ACTIVATIONS[kind]) for kind in set(layer_kinds(cfg))),
        default=0.0,
    )
    return MemoryEstimate(
        weight_bytes=weight_bytes,
        optimizer_bytes=weight_bytes * optimizer_multiplier,
        activation_bytes=activation,
        by_group=by_group,
    )


@dataclass
class StepTimeEstimate:
    compute_seconds: float
    comm_seconds: dict[str, float]
    events: list[CommEvent]
    event_seconds: list[float]
    memory: MemoryEstimate

    @property
    def total_seconds(self) -> float:
        return self.compute_seconds + sum(self.comm_seconds.values())

    @property
    def comm_total(self) -> float:
        return sum(self.comm_seconds.values())

    def by_kind(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for event, seconds in zip(self.events, self.event_seconds):
            out[event.kind] = out.get(event.kind, 0.0) + seconds
        return out

    def to_dict(self) -> dict:
        return {
            "compute_seconds": self.compute_seconds,
            "comm_seconds": dict(self.comm_seconds),
            "comm_by_kind": self.by_kind(),
            "total_seconds": self.total_seconds,
            "memory_bytes": {
                "weights": self.memory.weight_bytes,
                "optimizer": self.memory.optimizer_bytes,
                "activations": self.memory.activation_bytes,
                "total": self.memory.total,
                "by_group": dict(self.memory.by_group),
            },
            "events": [dict(e.to_dict(), seconds=s) for e, s in zip(self.events, self.event_seconds)],
        }


def estimate_step_time(
    cfg: ModelConfig,
    mesh: MeshSpec,
    profile: DeviceProfile,
    batch_tokens: int,
    specs: Mapping[str, ShardingSpec] | None = None,
    optimizer_multiplier: float = 2.0,
) -> StepTimeEstimate:
    """6 * N_activated * tokens of compute, then every collective in sequence."""
    specs = specs if specs is not None else default_specs("3d")
    activated = count_params(cfg).activated
    compute = 6.0 * activated * batch_tokens / (mesh.devices * profile.peak_flops * profile.mfu)
    events = plan_step(cfg, mesh, specs, batch_tokens, profile.bytes_per_value)
    seconds = [e.cost(profile) for e in events]
    comm = {axis.value: 0.0 for axis in MeshAxis}
    for event, s in zip(events, seconds):
        comm[event.axis.value] += s
    memory = memory_per_device(cfg, mesh, specs, optimizer_multiplier, batch_tokens, profile.bytes_per_value)
    return StepTimeEstimate(
        compute_seconds=compute,
        comm_seconds=comm,
        events=events,
        event_seconds=seconds,
        memory=memory,
    )


# =============================================================================
# Validation and strategy comparison
# =============================================================================

def validate_mesh(
    cfg: ModelConfig,
    mesh: MeshSpec,
    devices: int | None = None,
    batch_tokens: int | None = None,
    strategy: str = "3d",
) -> list[str]:
    """Every rule the mesh breaks for this config; an empty list means ok."""
    _check_strategy(strategy)
    errors = []
    experts = cfg.router.num_experts
    has_moe = bool(moe_layer_indices(cfg))
    if devices is not None and mesh.devices != devices:
        errors.append(f"mesh product {mesh.devices} does not match {devices} devices")
    if strategy != "3d":
        if mesh.expert != 1:
            errors.append(f"{strategy} has no expert axis, got expert={mesh.expert}")
        elif has_moe:
            try:
                expert_split(cfg, mesh, strategy)
            except ShardingError as e:
                errors.append(str(e))
    elif has_moe and mesh.expert > experts:
        errors.append(f"expert axis exceeds expert count ({mesh.expert} > {experts})")
    elif has_moe and experts % mesh.expert:
        errors.append(f"expert count {experts} is not divisible by the expert axis {mesh.expert}")
    for name, extent in (("heads", cfg.heads), ("d_model", cfg.d_model), ("ffn_hidden", cfg.ffn_hidden)):
        if extent % mesh.model:
            errors.append(f"{name}={extent} is not divisible by the model axis {mesh.model}")
    if batch_tokens is not None:
        if batch_tokens % cfg.seq_len:
            errors.append(f"batch_tokens={batch_tokens} is not a multiple of seq_len={cfg.seq_len}")
        elif (batch_tokens // cfg.seq_len) % (mesh.data * mesh.expert):
            errors.append(
                f"{batch_tokens // cfg.seq_len} sequences do not split over data x expert = "
                f"{mesh.data * mesh.expert} devices"
            )
    return errors


def strategy_mesh(cfg: ModelConfig, devices: int, strategy: str) -> MeshSpec:
    _check_strategy(strategy)
    has_moe = bool(moe_layer_indices(cfg))
    if strategy == "padded-2d" or (strategy == "naive-2d" and not has_moe):
        return MeshSpec(devices, 1, 1)
    if not has_moe:
        return MeshSpec(1, devices, 1)
    experts = min(cfg.router.num_experts, devices)
    if devices % experts:
        raise ShardingError(f"{devices} devices cannot hold {experts} experts one per core")
    if strategy == "3d":
        return MeshSpec(devices // experts, experts, 1)
    return MeshSpec(experts, 1, devices // experts)


@dataclass
class StrategyResult:
    strategy: str
    mesh: MeshSpec
    params_total: int
    expert_params_total: int
    estimate: StepTimeEstimate

    @property
    def step_seconds(self) -> float:
        return self.estimate.total_seconds

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "mesh": [self.mesh.data, self.mesh.expert, self.mesh.model],
            "params_total": self.params_total,
            "expert_params_total": self.expert_params_total,
            "step_seconds": self.step_seconds,
            "compute_seconds": self.estimate.compute_seconds,
            "comm_seconds": dict(self.estimate.comm_seconds),
            "memory_bytes": self.estimate.memory.total,
        }


@dataclass
class StrategyComparison:
    devices: int
    batch_tokens: int
    results: dict[str, StrategyResult]

    @property
    def ordered(self) -> list[str]:
        """Strategy names from slowest to fastest estimated step."""
        return sorted(self.results, key=lambda s: self.results[s].step_seconds, reverse=True)

    def to_dict(self) -> dict:
        return {
            "devices": self.devices,
            "batch_tokens": self.batch_tokens,
            "ordered": self.ordered,
            "strategies": {name: r.to_dict() for name, r in self.results.items()},
        }


def compare_strategies(
    cfg: ModelConfig,
    devices: int,
    profile: DeviceProfile,
    batch_tokens: int,
    strategies: Iterable[str] = STRATEGIES,
) -> StrategyComparison:
    per_expert = 2 * cfg.d_model * cfg.ffn_hidden
    moe_layers = len(moe_layer_indices(cfg))
    base = count_params(cfg).total
    results = {}
    for strategy in strategies:
        mesh = strategy_mesh(cfg, devices, strategy)
        aligned = align_to_mesh(cfg, mesh, strategy)
        experts = cfg.router.num_experts
        if strategy == "padded-2d" and moe_layers:
            experts = padded_experts(experts, devices)
        expert_total = experts * per_expert * moe_layers
        results[strategy] = StrategyResult(
            strategy=strategy,
            mesh=mesh,
            params_total=base + (experts - cfg.router.num_experts) * per_expert * moe_layers,
            expert_params_total=expert_total,
            estimate=estimate_step_time(aligned, mesh, profile, batch_tokens, default_specs(strategy)),
        )
    return StrategyComparison(devices=devices, batch_tokens=batch_tokens, results=results)


# =============================================================================
# Presets and reports
# =============================================================================

PRESET_BATCH_TOKENS = 2 ** 20


def preset_config(name: str, num_experts: int = 64) -> ModelConfig:
    """Backbones for simulator runs: "1.6b-moe" (every-4 MoE) and "6.4b-dense"."""
    from .routing import RouterConfig

    router = RouterConfig(num_experts=num_experts, top_k=2, capacity_factor=2.0)
    if name in ("1.6b-moe", "1.6b-dense"):
        return ModelConfig(
            layers=24, d_model=2048, heads=16, ffn_hidden=5632, vocab=32000, seq_len=4096,
            moe_placement="every-4" if name == "1.6b-moe" else "none", router=router,
        )
    if name == "6.4b-dense":
        return ModelConfig(
            layers=32, d_model=4096, heads=32, ffn_hidden=11008, vocab=32000, seq_len=4096,
            moe_placement="none", router=router,
        )
    raise ValueError(f"unknown preset '{name}'; expected 1.6b-moe, 1.6b-dense or 6.4b-dense")


def sharding_report(
    cfg: ModelConfig,
    mesh: MeshSpec,
    strategy: str,
    profile: DeviceProfile,
    batch_tokens: int,
) -> dict:
    """JSON-ready report: mesh, per-tensor shards, memory, events, step time."""
    specs = default_specs(strategy)
    cfg = align_to_mesh(cfg, mesh, strategy)
    extents = global_extents(cfg, mesh, batch_tokens, strategy)
    tensors = {}
    for name, tensor in TENSORS.items():
        tensors[name] = {
            "kind": tensor.kind,
            "dims": tensor.dims.upper(),
            "spec": str(specs[name]),
            "global_shape": list(tensor_shape(name, extents)),
            "shard_shape": list(tensor_shard(name, extents, specs, mesh)),
        }
    estimate = estimate_step_time(cfg, mesh, profile, batch_tokens, specs)
    return {
        "strategy": strategy,
        "mesh": {"data": mesh.data, "expert": mesh.expert, "model": mesh.model, "devices": mesh.devices},
        "batch_tokens": batch_tokens,
        "experts": extents["u"],
        "expert_slices": extents["e"],
        "capacity": extents["c"],
        "tensors": tensors,
        "step": estimate.to_dict(),
    }


def reassembles(name: str, extents: Mapping[str, int], specs: Mapping[str, ShardingSpec], mesh: MeshSpec) -> bool:
    """Shard extents times their axis products give back the global shape."""
    shard = tensor_shard(name, extents, specs, mesh)
    rebuilt = [n * math.prod(mesh.size(a) for a in axes) for n, axes in zip(shard, specs[name].dims)]
    return tuple(rebuilt) == tensor_shape(name, extents)


def balanced_logits(outer: int, groups: int, tokens: int, experts: int, seed: int = 0) -> np.ndarray:
    """Logits whose top-2 choices give every expert the same load in every group."""
    rng = np.random.default_rng(seed)
    logits = np.zeros((outer, groups, tokens, experts))
    for o in range(outer):
        for g in range(groups):
            perm = rng.permutation(experts)
            for s in range(tokens):
                row = np.ones(experts)
                row[perm[(s + 1) % experts]] = 3.0
                row[perm[s % experts]] = 5.0
                logits[o, g, s] = np.log(row / row.sum())
    return logits
