"""Named-dimension dense tensors and the pure ops the model is built from.

A Tensor is an immutable float64 array whose axes carry names ("o", "g",
"s", "e", "c", "m", "h", ...). Contractions are written as einsum subscript
strings; subscripts bind positionally to each input's axes and the output
axes are named by the output subscripts.

Everything here is a pure function over Tensors. Differentiable versions of
the same ops live in autograd.py and call back into these for the forward
values.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

import numpy as np

MAX_RANK = 6

_SUBSCRIPTS = re.compile(r"^[a-z]*$")


class TensorError(ValueError):
    """Base class for tensor construction and op errors."""


class ShapeError(TensorError):
    """Extents disagree, or a tensor is malformed."""


class SpecError(TensorError):
    """A subscript string or dimension name is invalid."""


# =============================================================================
# Tensor
# =============================================================================

class Tensor:
    """Immutable row-major float64 array with named dimensions."""

    __slots__ = ("dims", "data")

    def __init__(self, data, dims: Sequence[str]):
        array = np.array(data, dtype=np.float64)
        dims = tuple(dims)
        _check_layout(array, dims)
        array.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", array)

    @classmethod
    def wrap(cls, array: np.ndarray, dims: Sequence[str]) -> "Tensor":
        """Build a Tensor around a freshly computed array without copying it."""
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64, order="C")
        dims = tuple(dims)
        _check_layout(array, dims)
        array.flags.writeable = False
        object.__setattr__(tensor, "dims", dims)
        object.__setattr__(tensor, "data", array)
        return tensor

    @classmethod
    def zeros(cls, shape: Iterable[tuple[str, int]]) -> "Tensor":
        dims, extents = _split_shape(shape)
        return cls.wrap(np.zeros(extents), dims)

    @classmethod
    def ones(cls, shape: Iterable[tuple[str, int]]) -> "Tensor":
        dims, extents = _split_shape(shape)
        return cls.wrap(np.ones(extents), dims)

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls.wrap(np.asarray(float(value)), ())

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[tuple[str, int], ...]:
        return tuple(zip(self.dims, self.data.shape))

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def axis(self, name: str) -> int:
        try:
            return self.dims.index(name)
        except ValueError:
            raise SpecError(f"dimension '{name}' not in {self.dims}") from None

    def extent(self, name: str) -> int:
        return self.data.shape[self.axis(name)]

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has {self.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def transpose(self, dims: Sequence[str]) -> "Tensor":
        dims = tuple(dims)
        if sorted(dims) != sorted(self.dims):
            raise SpecError(f"transpose to {dims} does not permute {self.dims}")
        return Tensor.wrap(np.transpose(self.data, [self.axis(d) for d in dims]), dims)

    def rename(self, mapping: dict[str, str]) -> "Tensor":
        return Tensor.wrap(self.data, [mapping.get(d, d) for d in self.dims])

    def reshape(self, shape: Iterable[tuple[str, int]]) -> "Tensor":
        dims, extents = _split_shape(shape)
        if int(np.prod(extents, dtype=np.int64)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} into {tuple(zip(dims, extents))}")
        return Tensor.wrap(self.data.reshape(extents), dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    __hash__ = None

    def __repr__(self) -> str:
        shape = ", ".join(f"{d}={n}" for d, n in self.shape)
        return f"Tensor({shape})"


def _split_shape(shape: Iterable[tuple[str, int]]) -> tuple[tuple[str, ...], tuple[int, ...]]:
    pairs = list(shape)
    return tuple(p[0] for p in pairs), tuple(int(p[1]) for p in pairs)


def _check_layout(array: np.ndarray, dims: tuple[str, ...]) -> None:
    if array.ndim != len(dims):
        raise ShapeError(f"{len(dims)} dimension names for an array of rank {array.ndim}")
    if len(dims) > MAX_RANK:
        raise ShapeError(f"rank {len(dims)} exceeds maximum rank {MAX_RANK}")
    if len(set(dims)) != len(dims):
        raise SpecError(f"duplicate dimension names in {dims}")
    if any(not isinstance(d, str) or not d for d in dims):
        raise SpecError(f"dimension names must be non-empty strings, got {dims}")
    if any(n < 1 for n in array.shape):
        raise ShapeError(f"all extents must be >= 1, got {array.shape}")


# =============================================================================
# Einsum
# =============================================================================

def parse_spec(spec: str, n_inputs: int) -> tuple[list[str], str]:
    """Split "ab,bc->ac" into (["ab", "bc"], "ac") and validate it."""
    spec = spec.replace(" ", "")
    if "->" not in spec:
        raise SpecError(f"einsum spec '{spec}' needs an explicit '->' output")
    lhs, out = spec.split("->", 1)
    inputs = lhs.split(",")
    if len(inputs) != n_inputs:
        raise SpecError(f"einsum spec '{spec}' names {len(inputs)} inputs, got {n_inputs}")
    for subs in inputs + [out]:
        if not _SUBSCRIPTS.match(subs):
            raise SpecError(f"einsum spec '{spec}': subscripts must be lowercase letters")
        if len(set(subs)) != len(subs):
            raise SpecError(f"einsum spec '{spec}': repeated subscript in '{subs}'")
    seen = set("".join(inputs))
    unknown = [c for c in out if c not in seen]
    if unknown:
        raise SpecError(f"einsum spec '{spec}': output subscripts {unknown} appear in no input")
    return inputs, out


def check_operands(spec: str, subscripts: list[str], arrays: Sequence[np.ndarray]) -> None:
    """Raise unless each operand's rank and shared-subscript extents agree."""
    extents: dict[str, int] = {}
    for subs, array in zip(subscripts, arrays):
        if array.ndim != len(subs):
            raise SpecError(
                f"einsum spec '{spec}': '{subs}' names {len(subs)} dims, operand has {array.ndim}"
            )
        for c, n in zip(subs, array.shape):
            if extents.setdefault(c, n) != n:
                raise ShapeError(
                    f"einsum spec '{spec}': subscript '{c}' has extents {extents[c]} and {n}"
                )


def einsum(spec: str, inputs: Sequence[Tensor]) -> Tensor:
    """Sum-of-products contraction; output dims are named by the output subscripts."""
    subscripts, out = parse_spec(spec, len(inputs))
    arrays = [t.data for t in inputs]
    check_operands(spec, subscripts, arrays)
    result = np.einsum(f"{','.join(subscripts)}->{out}", *arrays, optimize=False)
    return Tensor.wrap(np.asarray(result), tuple(out))


# =============================================================================
# Nonlinearities
# =============================================================================

def softmax(x: Tensor, axis: str) -> Tensor:
    return Tensor.wrap(softmax_array(x.data, x.axis(axis)), x.dims)


def softmax_array(a: np.ndarray, axis: int) -> np.ndarray:
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_array(a: np.ndarray, axis: int) -> np.ndarray:
    return a - logsumexp_array(a, axis, keepdims=True)


def logsumexp(x: Tensor, axis: str) -> Tensor:
    """Log-sum-exp over `axis`, which is removed from the result."""
    ax = x.axis(axis)
    dims = tuple(d for d in x.dims if d != axis)
    return Tensor.wrap(logsumexp_array(x.data, ax), dims)


def logsumexp_array(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    out = peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def silu_array(a: np.ndarray) -> np.ndarray:
    return a * sigmoid_array(a)


def sigmoid_array(a: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def silu(x: Tensor) -> Tensor:
    return Tensor.wrap(silu_array(x.data), x.dims)


def top_k(x: Tensor, axis: str, k: int) -> tuple[Tensor, np.ndarray]:
    """Largest k entries along `axis`, descending, ties to the lowest index.

    The selected axis is renamed "k" in the returned values; indices come back
    as an int64 array of the same shape.
    """
    ax = x.axis(axis)
    extent = x.data.shape[ax]
    if not 1 <= k <= extent:
        raise TensorError(f"top_k: k={k} outside [1, {extent}] for axis '{axis}'")
    indices = top_k_indices(x.data, ax, k)
    values = np.take_along_axis(x.data, indices, axis=ax)
    dims = tuple("k" if d == axis else d for d in x.dims)
    return Tensor.wrap(values, dims), indices


def top_k_indices(a: np.ndarray, axis: int, k: int) -> np.ndarray:
    order = np.argsort(-a, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis).astype(np.int64)


def rms_norm(x: Tensor, gain: Tensor, eps: float, axis: str = "m") -> Tensor:
    """x * gain / sqrt(mean(x**2) + eps) over `axis`."""
    if eps < 0:
        raise TensorError(f"rms_norm: eps must be >= 0, got {eps}")
    ax = x.axis(axis)
    if gain.rank != 1 or gain.extents[0] != x.data.shape[ax]:
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match '{axis}' of {x.shape}")
    return Tensor.wrap(rms_norm_array(x.data, gain.data, eps, ax), x.dims)


def rms_norm_array(a: np.ndarray, gain: np.ndarray, eps: float, axis: int) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(a * a, axis=axis, keepdims=True) + eps)
    return a * inv * _along(gain, a.ndim, axis)


def _along(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


# =============================================================================
# Rotary position embedding
# =============================================================================

def rope_angles(positions: Sequence[int], head_dim: int, base: float) -> np.ndarray:
    """Angles pos * base**(-2i/d) with shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ShapeError(f"rope: head dimension must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope_rotate(a: np.ndarray, angles: np.ndarray, seq_axis: int, head_axis: int) -> np.ndarray:
    """Rotate adjacent pairs (2i, 2i+1) of `head_axis` by `angles`[pos, i]."""
    moved = np.moveaxis(a, (seq_axis, head_axis), (-2, -1))
    even, odd = moved[..., 0::2], moved[..., 1::2]
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(moved)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return np.moveaxis(out, (-2, -1), (seq_axis, head_axis))


def rope_apply(
    x: Tensor,
    positions: Sequence[int],
    base: float = 10000.0,
    seq_axis: str = "t",
    head_axis: str = "d",
) -> Tensor:
    s_ax, h_ax = x.axis(seq_axis), x.axis(head_axis)
    if len(positions) != x.data.shape[s_ax]:
        raise ShapeError(
            f"rope: {len(positions)} positions for '{seq_axis}' of extent {x.data.shape[s_ax]}"
        )
    angles = rope_angles(positions, x.data.shape[h_ax], base)
    return Tensor.wrap(rope_rotate(x.data, angles, s_ax, h_ax), x.dims)
