"""Reverse-mode gradients over a recorded op tape.

A GradGraph records every differentiable op applied to its Vars. Leaves are
named trainable parameters; constants (routing selections, dispatch masks,
causal masks, token ids) never receive gradients. Because routing decisions
enter the graph only as constants, replaying the tape with perturbed leaves
re-evaluates the loss with the routing held fixed, which is what
grad_check's finite differences compare against.

Usage:
    graph = GradGraph()
    x = graph.leaf("x", Tensor([1.0, 2.0], ["a"]))
    loss = graph.sum(graph.square(x))
    grads = backward(graph, loss)   # {"x": array([2., 4.])}
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    check_operands,
    log_softmax_array,
    logsumexp_array,
    parse_spec,
    rms_norm_array,
    rope_angles,
    rope_rotate,
    sigmoid_array,
    silu_array,
    softmax_array,
)

_graph_ids = itertools.count()


class GraphError(ValueError):
    """Misuse of a GradGraph: foreign Vars, non-scalar losses, unknown leaves."""


@dataclass(frozen=True)
class Var:
    """Reference to one recorded value in a GradGraph."""

    graph_id: int
    index: int
    value: Tensor

    @property
    def dims(self) -> tuple[str, ...]:
        return self.value.dims

    def extent(self, name: str) -> int:
        return self.value.extent(name)

    def item(self) -> float:
        return self.value.item()


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Op:
    forward: Callable[[list[Tensor], dict], Tensor]
    backward: Callable[[np.ndarray, list[Tensor], Tensor, dict], list[np.ndarray | None]]


# =============================================================================
# Named broadcasting helpers
# =============================================================================

def _align(b: Tensor, a: Tensor) -> np.ndarray:
    """b's array transposed and reshaped to broadcast against a's dims."""
    missing = [d for d in b.dims if d not in a.dims]
    if missing:
        raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}: {missing} not in target")
    for d in b.dims:
        if b.extent(d) != a.extent(d):
            raise ShapeError(f"dimension '{d}' has extents {a.extent(d)} and {b.extent(d)}")
    order = [d for d in a.dims if d in b.dims]
    arr = b.transpose(order).data
    return arr.reshape([b.extent(d) if d in b.dims else 1 for d in a.dims])


def _unalign(grad: np.ndarray, a_dims: tuple[str, ...], b: Tensor) -> np.ndarray:
    """Reduce a gradient shaped like a back to b's dims and order."""
    extra = tuple(i for i, d in enumerate(a_dims) if d not in b.dims)
    reduced = np.sum(grad, axis=extra) if extra else grad
    kept = [d for d in a_dims if d in b.dims]
    return np.transpose(reduced, [kept.index(d) for d in b.dims])


def _expand(grad: np.ndarray, dims: tuple[str, ...], out_dims: tuple[str, ...]) -> np.ndarray:
    """Reinsert reduced axes (size 1) so grad broadcasts against `dims`."""
    shape = []
    it = iter(grad.shape)
    for d in dims:
        shape.append(next(it) if d in out_dims else 1)
    return grad.reshape(shape)


# =============================================================================
# Op table: forward values and vector-Jacobian products
# =============================================================================

def _einsum_fwd(xs, attrs):
    subs, out = attrs["subs"], attrs["out"]
    result = np.einsum(f"{','.join(subs)}->{out}", *(x.data for x in xs), optimize=False)
    return Tensor.wrap(np.asarray(result), tuple(out))


def _einsum_bwd(g, xs, y, attrs):
    subs, out = attrs["subs"], attrs["out"]
    grads = []
    for i, target in enumerate(subs):
        others = [(s, x.data) for j, (s, x) in enumerate(zip(subs, xs)) if j != i]
        present = set(out).union(*(set(s) for s, _ in others))
        kept = "".join(c for c in target if c in present)
        spec = ",".join([out] + [s for s, _ in others]) + "->" + kept
        partial = np.einsum(spec, g, *(a for _, a in others), optimize=False)
        if kept != target:
            shape = [xs[i].data.shape[k] if c in kept else 1 for k, c in enumerate(target)]
            partial = np.broadcast_to(partial.reshape(shape), xs[i].data.shape)
        grads.append(np.array(partial))
    return grads


def _add_fwd(xs, attrs):
    a, b = xs
    return Tensor.wrap(a.data + _align(b, a), a.dims)


def _add_bwd(g, xs, y, attrs):
    return [g, _unalign(g, xs[0].dims, xs[1])]


def _sub_fwd(xs, attrs):
    a, b = xs
    return Tensor.wrap(a.data - _align(b, a), a.dims)


def _sub_bwd(g, xs, y, attrs):
    return [g, -_unalign(g, xs[0].dims, xs[1])]


def _mul_fwd(xs, attrs):
    a, b = xs
    return Tensor.wrap(a.data * _align(b, a), a.dims)


def _mul_bwd(g, xs, y, attrs):
    a, b = xs
    return [g * _align(b, a), _unalign(g * a.data, a.dims, b)]


def _div_fwd(xs, attrs):
    a, b = xs
    return Tensor.wrap(a.data / _align(b, a), a.dims)


def _div_bwd(g, xs, y, attrs):
    a, b = xs
    bb = _align(b, a)
    return [g / bb, _unalign(-g * a.data / (bb * bb), a.dims, b)]


def _scale_fwd(xs, attrs):
    return Tensor.wrap(xs[0].data * attrs["c"], xs[0].dims)


def _scale_bwd(g, xs, y, attrs):
    return [g * attrs["c"]]


def _square_fwd(xs, attrs):
    return Tensor.wrap(xs[0].data * xs[0].data, xs[0].dims)


def _square_bwd(g, xs, y, attrs):
    return [2.0 * xs[0].data * g]


def _exp_fwd(xs, attrs):
    return Tensor.wrap(np.exp(xs[0].data), xs[0].dims)


def _exp_bwd(g, xs, y, attrs):
    return [g * y.data]


def _log_fwd(xs, attrs):
    return Tensor.wrap(np.log(xs[0].data), xs[0].dims)


def _log_bwd(g, xs, y, attrs):
    return [g / xs[0].data]


def _silu_fwd(xs, attrs):
    return Tensor.wrap(silu_array(xs[0].data), xs[0].dims)


def _silu_bwd(g, xs, y, attrs):
    a = xs[0].data
    s = sigmoid_array(a)
    return [g * s * (1.0 + a * (1.0 - s))]


def _softmax_fwd(xs, attrs):
    x = xs[0]
    return Tensor.wrap(softmax_array(x.data, x.axis(attrs["axis"])), x.dims)


def _softmax_bwd(g, xs, y, attrs):
    ax = y.axis(attrs["axis"])
    p = y.data
    return [p * (g - np.sum(g * p, axis=ax, keepdims=True))]


def _log_softmax_fwd(xs, attrs):
    x = xs[0]
    return Tensor.wrap(log_softmax_array(x.data, x.axis(attrs["axis"])), x.dims)


def _log_softmax_bwd(g, xs, y, attrs):
    ax = y.axis(attrs["axis"])
    return [g - np.exp(y.data) * np.sum(g, axis=ax, keepdims=True)]


def _logsumexp_fwd(xs, attrs):
    x = xs[0]
    axis = attrs["axis"]
    dims = tuple(d for d in x.dims if d != axis)
    return Tensor.wrap(logsumexp_array(x.data, x.axis(axis)), dims)


def _logsumexp_bwd(g, xs, y, attrs):
    x = xs[0]
    ax = x.axis(attrs["axis"])
    return [softmax_array(x.data, ax) * np.expand_dims(g, ax)]


def _rms_norm_fwd(xs, attrs):
    x, gain = xs
    ax = x.axis(attrs["axis"])
    if gain.rank != 1 or gain.extents[0] != x.data.shape[ax]:
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match {x.shape}")
    return Tensor.wrap(rms_norm_array(x.data, gain.data, attrs["eps"], ax), x.dims)


def _rms_norm_bwd(g, xs, y, attrs):
    x, gain = xs
    ax = x.axis(attrs["axis"])
    a = x.data
    n = a.shape[ax]
    r = 1.0 / np.sqrt(np.mean(a * a, axis=ax, keepdims=True) + attrs["eps"])
    shape = [1] * a.ndim
    shape[ax] = n
    gg = g * gain.data.reshape(shape)
    gx = r * gg - a * (r ** 3) * np.sum(gg * a, axis=ax, keepdims=True) / n
    other = tuple(i for i in range(a.ndim) if i != ax)
    ggain = np.sum(g * a * r, axis=other) if other else g * a * r
    return [gx, ggain]


def _rope_fwd(xs, attrs):
    x = xs[0]
    s_ax, h_ax = x.axis(attrs["seq_axis"]), x.axis(attrs["head_axis"])
    angles = rope_angles(attrs["positions"], x.data.shape[h_ax], attrs["base"])
    return Tensor.wrap(rope_rotate(x.data, angles, s_ax, h_ax), x.dims)


def _rope_bwd(g, xs, y, attrs):
    x = xs[0]
    s_ax, h_ax = x.axis(attrs["seq_axis"]), x.axis(attrs["head_axis"])
    angles = rope_angles(attrs["positions"], x.data.shape[h_ax], attrs["base"])
    return [rope_rotate(g, -angles, s_ax, h_ax)]


def _reshape_fwd(xs, attrs):
    return xs[0].reshape(attrs["shape"])


def _reshape_bwd(g, xs, y, attrs):
    return [g.reshape(xs[0].extents)]


def _transpose_fwd(xs, attrs):
    return xs[0].transpose(attrs["dims"])


def _transpose_bwd(g, xs, y, attrs):
    order = [y.dims.index(d) for d in xs[0].dims]
    return [np.transpose(g, order)]


def _sum_fwd(xs, attrs):
    x = xs[0]
    dims = attrs["dims"]
    axes = tuple(x.axis(d) for d in dims)
    kept = tuple(d for d in x.dims if d not in dims)
    return Tensor.wrap(np.asarray(np.sum(x.data, axis=axes)), kept)


def _sum_bwd(g, xs, y, attrs):
    x = xs[0]
    return [np.broadcast_to(_expand(g, x.dims, y.dims), x.extents).copy()]


def _mean_fwd(xs, attrs):
    total = _sum_fwd(xs, attrs)
    count = xs[0].size // max(total.size, 1)
    return Tensor.wrap(total.data / count, total.dims)


def _mean_bwd(g, xs, y, attrs):
    count = xs[0].size // max(y.size, 1)
    return [_sum_bwd(g, xs, y, attrs)[0] / count]


def _take_fwd(xs, attrs):
    table = xs[0]
    ids = attrs["ids"]
    return Tensor.wrap(table.data[ids], tuple(attrs["dims"]) + table.dims[1:])


def _take_bwd(g, xs, y, attrs):
    grad = np.zeros(xs[0].extents)
    np.add.at(grad, attrs["ids"], g)
    return [grad]


def _pick_fwd(xs, attrs):
    x = xs[0]
    ax = x.axis(attrs["axis"])
    picked = np.take_along_axis(x.data, np.expand_dims(attrs["ids"], ax), axis=ax)
    return Tensor.wrap(np.squeeze(picked, axis=ax), tuple(d for d in x.dims if d != attrs["axis"]))


def _pick_bwd(g, xs, y, attrs):
    x = xs[0]
    ax = x.axis(attrs["axis"])
    grad = np.zeros(x.extents)
    np.put_along_axis(grad, np.expand_dims(attrs["ids"], ax), np.expand_dims(g, ax), axis=ax)
    return [grad]


_OPS: dict[str, _Op] = {
    "einsum": _Op(_einsum_fwd, _einsum_bwd),
    "add": _Op(_add_fwd, _add_bwd),
    "sub": _Op(_sub_fwd, _sub_bwd),
    "mul": _Op(_mul_fwd, _mul_bwd),
    "div": _Op(_div_fwd, _div_bwd),
    "scale": _Op(_scale_fwd, _scale_bwd),
    "square": _Op(_square_fwd, _square_bwd),
    "exp": _Op(_exp_fwd, _exp_bwd),
    "log": _Op(_log_fwd, _log_bwd),
    "silu": _Op(_silu_fwd, _silu_bwd),
    "softmax": _Op(_softmax_fwd, _softmax_bwd),
    "log_softmax": _Op(_log_softmax_fwd, _log_softmax_bwd),
    "logsumexp": _Op(_logsumexp_fwd, _logsumexp_bwd),
    "rms_norm": _Op(_rms_norm_fwd, _rms_norm_bwd),
    "rope": _Op(_rope_fwd, _rope_bwd),
    "reshape": _Op(_reshape_fwd, _reshape_bwd),
    "transpose": _Op(_transpose_fwd, _transpose_bwd),
    "sum": _Op(_sum_fwd, _sum_bwd),
    "mean": _Op(_mean_fwd, _mean_bwd),
    "take": _Op(_take_fwd, _take_bwd),
    "pick": _Op(_pick_fwd, _pick_bwd),
}


# =============================================================================
# GradGraph
# =============================================================================

class GradGraph:
    """Append-only tape. Record order is a topological order."""

    def __init__(self):
        self.id = next(_graph_ids)
        self._values: list[Tensor] = []
        self._records: list[_Record | None] = []
        self._trainable: list[bool] = []
        self.leaves: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value: Tensor, record: _Record | None, trainable: bool) -> Var:
        self._values.append(value)
        self._records.append(record)
        self._trainable.append(trainable)
        return Var(self.id, len(self._values) - 1, value)

    def _index(self, v: Var) -> int:
        if not isinstance(v, Var) or v.graph_id != self.id:
            raise GraphError(f"{v!r} does not belong to this graph")
        return v.index

    # -------------------------------------------------------------------------
    # Inputs
    # -------------------------------------------------------------------------

    def leaf(self, name: str, value: Tensor) -> Var:
        if name in self.leaves:
            raise GraphError(f"leaf '{name}' already recorded")
        var = self._push(value, None, True)
        self.leaves[name] = var.index
        return var

    def constant(self, value: Tensor) -> Var:
        return self._push(value, None, False)

    def stop_gradient(self, v: Var) -> Var:
        return self.constant(v.value)

    # -------------------------------------------------------------------------
    # Recording
    # -------------------------------------------------------------------------

    def apply(self, op: str, inputs: Sequence[Var], **attrs) -> Var:
        indices = tuple(self._index(v) for v in inputs)
        value = _OPS[op].forward([self._values[i] for i in indices], attrs)
        trainable = any(self._trainable[i] for i in indices)
        return self._push(value, _Record(op, indices, attrs), trainable)

    def einsum(self, spec: str, *inputs: Var) -> Var:
        subs, out = parse_spec(spec, len(inputs))
        check_operands(spec, subs, [v.value.data for v in inputs])
        return self.apply("einsum", inputs, subs=subs, out=out)

    def add(self, a: Var, b: Var) -> Var:
        return self.apply("add", (a, b))

    def sub(self, a: Var, b: Var) -> Var:
        return self.apply("sub", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        return self.apply("mul", (a, b))

    def div(self, a: Var, b: Var) -> Var:
        return self.apply("div", (a, b))

    def scale(self, a: Var, c: float) -> Var:
        return self.apply("scale", (a,), c=float(c))

    def square(self, a: Var) -> Var:
        return self.apply("square", (a,))

    def exp(self, a: Var) -> Var:
        return self.apply("exp", (a,))

    def log(self, a: Var) -> Var:
        return self.apply("log", (a,))

    def silu(self, a: Var) -> Var:
        return self.apply("silu", (a,))

    def softmax(self, a: Var, axis: str) -> Var:
        a.value.axis(axis)
        return self.apply("softmax", (a,), axis=axis)

    def log_softmax(self, a: Var, axis: str) -> Var:
        a.value.axis(axis)
        return self.apply("log_softmax", (a,), axis=axis)

    def logsumexp(self, a: Var, axis: str) -> Var:
        a.value.axis(axis)
        return self.apply("logsumexp", (a,), axis=axis)

    def rms_norm(self, a: Var, gain: Var, eps: float, axis: str = "m") -> Var:
        return self.apply("rms_norm", (a, gain), eps=float(eps), axis=axis)

    def rope(
        self,
        a: Var,
        positions: Sequence[int],
        base: float = 10000.0,
        seq_axis: str = "t",
        head_axis: str = "d",
    ) -> Var:
        if len(positions) != a.extent(seq_axis):
            raise ShapeError(f"rope: {len(positions)} positions for {a.value.shape}")
        return self.apply(
            "rope", (a,), positions=tuple(int(p) for p in positions), base=float(base),
            seq_axis=seq_axis, head_axis=head_axis,
        )

    def reshape(self, a: Var, shape: Sequence[tuple[str, int]]) -> Var:
        return self.apply("reshape", (a,), shape=tuple((d, int(n)) for d, n in shape))

    def transpose(self, a: Var, dims: Sequence[str]) -> Var:
        return self.apply("transpose", (a,), dims=tuple(dims))

    def sum(self, a: Var, dims: Sequence[str] | None = None) -> Var:
        dims = a.dims if dims is None else tuple(dims)
        for d in dims:
            a.value.axis(d)
        return self.apply("sum", (a,), dims=tuple(dims))

    def mean(self, a: Var, dims: Sequence[str] | None = None) -> Var:
        dims = a.dims if dims is None else tuple(dims)
        for d in dims:
            a.value.axis(d)
        return self.apply("mean", (a,), dims=tuple(dims))

    def take(self, table: Var, ids: np.ndarray, dims: Sequence[str]) -> Var:
        """Row lookup: table (v, ...) indexed by an integer array named `dims`."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != len(dims):
            raise ShapeError(f"take: ids of rank {ids.ndim} named {tuple(dims)}")
        return self.apply("take", (table,), ids=ids, dims=tuple(dims))

    def pick(self, a: Var, ids: np.ndarray, axis: str) -> Var:
        """Select one entry along `axis` per remaining position (targets)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != a.value.rank - 1:
            raise ShapeError(f"pick: ids of rank {ids.ndim} for {a.value.shape}")
        return self.apply("pick", (a,), ids=ids, axis=axis)

    # -------------------------------------------------------------------------
    # Replay
    # -------------------------------------------------------------------------

    def replay(self, overrides: Mapping[str, np.ndarray | Tensor] | None = None) -> list[Tensor]:
        """Recompute every recorded value, optionally with new leaf values."""
        values = list(self._values)
        for name, value in (overrides or {}).items():
            if name not in self.leaves:
                raise GraphError(f"unknown leaf '{name}'")
            idx = self.leaves[name]
            dims = values[idx].dims
            values[idx] = value if isinstance(value, Tensor) else Tensor(value, dims)
        for idx, record in enumerate(self._records):
            if record is not None:
                values[idx] = _OPS[record.op].forward([values[i] for i in record.inputs], record.attrs)
        return values

    def replay_value(self, var: Var, overrides: Mapping[str, np.ndarray | Tensor] | None = None) -> Tensor:
        return self.replay(overrides)[self._index(var)]


def backward(graph: GradGraph, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every leaf of the graph.

    Leaves the loss does not depend on get zero gradients.
    """
    root = graph._index(loss)
    if loss.value.rank != 0:
        raise GraphError(f"loss must be a scalar, got {loss.value.shape}")
    grads: dict[int, np.ndarray] = {root: np.ones(())}
    for idx in range(root, -1, -1):
        record = graph._records[idx]
        if record is None or idx not in grads:
            continue
        g = grads.pop(idx)
        inputs = [graph._values[i] for i in record.inputs]
        partials = _OPS[record.op].backward(g, inputs, graph._values[idx], record.attrs)
        for i, partial in zip(record.inputs, partials):
            if partial is None or not graph._trainable[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + partial
            else:
                grads[i] = np.array(partial, dtype=np.float64)
    out = {}
    for name, idx in graph.leaves.items():
        g = grads.get(idx)
        out[name] = g.reshape(graph._values[idx].extents) if g is not None else np.zeros(
            graph._values[idx].extents
        )
    return out


# =============================================================================
# Finite-difference check
# =============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_leaf: str | None
    worst_index: tuple[int, ...] | None
    checked: int
    per_leaf: dict[str, float]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    fn: Callable[[GradGraph, dict[str, Var]], Var],
    point: Mapping[str, np.ndarray | Tensor],
    eps: float = 1e-5,
    *,
    samples_per_leaf: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() against central differences at `point`.

    `fn` builds the scalar loss on a fresh graph from the leaf Vars it is
    given. Relative error is |analytic - numeric| / max(|analytic|,
    |numeric|, floor). With `samples_per_leaf`, a seeded subset of each
    leaf's elements is checked instead of all of them.
    """
    graph = GradGraph()
    leaves = {}
    for name, value in point.items():
        tensor = value if isinstance(value, Tensor) else Tensor(value, [f"i{k}" for k in range(np.ndim(value))])
        leaves[name] = graph.leaf(name, tensor)
    loss = fn(graph, leaves)
    analytic = backward(graph, loss)

    rng = np.random.default_rng(seed)
    max_rel, max_abs = 0.0, 0.0
    worst_leaf, worst_index = None, None
    per_leaf: dict[str, float] = {}
    checked = 0
    for name, var in leaves.items():
        base = var.value.data
        if samples_per_leaf is not None and samples_per_leaf < base.size:
            flat = np.sort(rng.choice(base.size, size=samples_per_leaf, replace=False))
        else:
            flat = np.arange(base.size)
        leaf_worst = 0.0
        for f in flat:
            idx = np.unravel_index(int(f), base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            up = graph.replay_value(loss, {name: plus}).item()
            down = graph.replay_value(loss, {name: minus}).item()
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name][idx])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), floor)
            leaf_worst = max(leaf_worst, rel_err)
            max_abs = max(max_abs, abs_err)
            if worst_leaf is None or rel_err > max_rel:
                max_rel = rel_err
                worst_leaf, worst_index = name, tuple(int(i) for i in idx)
            checked += 1
        per_leaf[name] = leaf_worst
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        worst_leaf=worst_leaf,
        worst_index=worst_index,
        checked=checked,
        per_leaf=per_leaf,
    )
