"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors are thin wrappers around numpy arrays. While a `Tape` is active,
every operation appends a node holding the callbacks needed for its local
gradient rule; `backward` walks the record in reverse and returns the
gradients of every leaf that asked for one. Without an active tape,
operations just compute values, which keeps evaluation cheap.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

# Lower bound applied to log arguments so probabilities of 0 stay finite.
CLAMP_MIN = 1e-12

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class RecordError(RuntimeError):
    """Computation-record misuse: nested records, reuse after backward,
    or differentiating a tensor that was never recorded."""


class Tensor:
    """A dense float64 array, optionally tracked on the active record.

    A tensor with `requires_grad` becomes a leaf of the recorded graph the
    first time an operation consumes it; everything else is treated as a
    constant and never receives a gradient.
    """

    __slots__ = ("data", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "is_leaf", "shape")

    def __init__(self, parents, is_leaf, shape):
        # parents: tuple of (input node id, pullback); empty for leaves
        self.parents = parents
        self.is_leaf = is_leaf
        self.shape = shape


_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered operation record for one forward pass.

    Use as a context manager; only one record may be active at a time.
    `backward` consumes the record, after which it can neither record new
    operations nor replay again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.spent = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RecordError("another computation record is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False


def active_tape() -> Tape | None:
    return _ACTIVE


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _leaf_id(t: Tensor) -> int | None:
    """Node id of `t` on the active record, registering a leaf if needed."""
    tape = _ACTIVE
    if tape is None:
        return None
    if tape.spent:
        raise RecordError("record already consumed by backward; start a new Tape")
    if t.tape is tape and t.node is not None:
        return t.node
    if not t.requires_grad:
        return None
    tape.nodes.append(_Node((), True, t.data.shape))
    t.tape = tape
    t.node = len(tape.nodes) - 1
    return t.node


def _result(value: np.ndarray, parents, requires_grad: bool) -> Tensor:
    out = Tensor(value)
    out.requires_grad = requires_grad
    tape = _ACTIVE
    live = tuple((i, pb) for i, pb in parents if i is not None)
    if tape is not None and live:
        tape.nodes.append(_Node(live, False, out.data.shape))
        out.tape = tape
        out.node = len(tape.nodes) - 1
    return out


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Only scalar-with-tensor and equal-shape broadcasting are supported.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _shrink(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    _check_binary(av, bv, "add")
    parents = [
        (_leaf_id(a), lambda g: _shrink(g, av.shape)),
        (_leaf_id(b), lambda g: _shrink(g, bv.shape)),
    ]
    return _result(av + bv, parents, a.requires_grad or b.requires_grad)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    _check_binary(av, bv, "sub")
    parents = [
        (_leaf_id(a), lambda g: _shrink(g, av.shape)),
        (_leaf_id(b), lambda g: _shrink(-g, bv.shape)),
    ]
    return _result(av - bv, parents, a.requires_grad or b.requires_grad)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    _check_binary(av, bv, "mul")
    parents = [
        (_leaf_id(a), lambda g: _shrink(g * bv, av.shape)),
        (_leaf_id(b), lambda g: _shrink(g * av, bv.shape)),
    ]
    return _result(av * bv, parents, a.requires_grad or b.requires_grad)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, [(_leaf_id(a), lambda g: -g)], a.requires_grad)


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _result(value, [(_leaf_id(a), lambda g: g * value)], a.requires_grad)


def log(a) -> Tensor:
    """Natural log with the argument clamped below at CLAMP_MIN."""
    a = as_tensor(a)
    av = a.data
    value = np.log(np.maximum(av, CLAMP_MIN))

    def pull(g):
        live = av > CLAMP_MIN
        return np.where(live, g / np.where(live, av, 1.0), 0.0)

    return _result(value, [(_leaf_id(a), pull)], a.requires_grad)


def gelu(a) -> Tensor:
    """GELU activation, tanh approximation."""
    a = as_tensor(a)
    av = a.data
    inner = _GELU_K * (av + _GELU_C * (av * av * av))
    tanh = np.tanh(inner)
    value = 0.5 * av * (1.0 + tanh)

    def pull(g):
        sech2 = 1.0 - tanh * tanh
        local = 0.5 * (1.0 + tanh) + 0.5 * av * sech2 * _GELU_K * (1.0 + 3.0 * _GELU_C * av * av)
        return g * local

    return _result(value, [(_leaf_id(a), pull)], a.requires_grad)


_ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "log": log,
    "exp": exp,
    "gelu": gelu,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch to a named elementwise operation."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """2-D matrix product, with optional transposition of either operand."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    left = av.T if transpose_a else av
    right = bv.T if transpose_b else bv
    if left.shape[1] != right.shape[0]:
        raise ShapeError(
            f"matmul: {av.shape} @ {bv.shape} "
            f"(transpose_a={transpose_a}, transpose_b={transpose_b}) has mismatched inner dims"
        )
    value = left @ right

    # Transposed pullbacks are copied to C order so a gradient's memory
    # layout never depends on which other consumers share the operand;
    # downstream BLAS calls are layout-sensitive at the last ulp.
    def pull_a(g):
        da = g @ right.T
        return np.ascontiguousarray(da.T) if transpose_a else da

    def pull_b(g):
        db = left.T @ g
        return np.ascontiguousarray(db.T) if transpose_b else db

    parents = [(_leaf_id(a), pull_a), (_leaf_id(b), pull_b)]
    return _result(value, parents, a.requires_grad or b.requires_grad)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis of a 1-D or 2-D tensor."""
    x = as_tensor(x)
    v = x.data
    if v.ndim not in (1, 2) or v.shape[-1] == 0:
        raise ShapeError(f"softmax_rows needs non-empty rows, got shape {v.shape}")
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=-1, keepdims=True)

    def pull(g):
        dot = np.sum(g * value, axis=-1, keepdims=True)
        return (g - dot) * value

    return _result(value, [(_leaf_id(x), pull)], x.requires_grad)


def reduce(kind: str, x, axis: int | None = None, mask=None) -> Tensor:
    """Sum or mean over all elements or one axis, optionally mask-weighted.

    The mask, when given, must match x's shape; it participates as fixed
    weights and never receives a gradient. A masked mean divides by the
    mask total along the reduced axis.
    """
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    x = as_tensor(x)
    v = x.data
    nd = v.ndim
    if axis is not None:
        if not isinstance(axis, int) or axis < -nd or axis >= nd:
            raise ShapeError(f"axis {axis} out of range for shape {v.shape}")
        axis = axis % nd
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if m.shape != v.shape:
            raise ShapeError(f"mask shape {m.shape} does not match input shape {v.shape}")

    if m is None:
        if kind == "sum":
            value = np.asarray(np.sum(v, axis=axis))

            def pull(g):
                gg = np.asarray(g)
                if axis is not None:
                    gg = np.expand_dims(gg, axis)
                return np.broadcast_to(gg, v.shape)

        else:
            count = v.size if axis is None else v.shape[axis]
            if count == 0:
                raise ShapeError("mean over zero elements")
            value = np.asarray(np.mean(v, axis=axis))

            def pull(g):
                gg = np.asarray(g) / count
                if axis is not None:
                    gg = np.expand_dims(gg, axis)
                return np.broadcast_to(gg, v.shape)

    else:
        weighted = np.asarray(np.sum(v * m, axis=axis))
        if kind == "sum":
            value = weighted

            def pull(g):
                gg = np.asarray(g)
                if axis is not None:
                    gg = np.expand_dims(gg, axis)
                return np.broadcast_to(gg, v.shape) * m

        else:
            denom = np.asarray(np.sum(m, axis=axis))
            if np.any(denom == 0.0):
                raise ShapeError("mask selects no elements along the reduced axis")
            value = weighted / denom

            def pull(g):
                gg = np.asarray(g) / denom
                if axis is not None:
                    gg = np.expand_dims(gg, axis)
                return np.broadcast_to(gg, v.shape) * m

    return _result(value, [(_leaf_id(x), pull)], x.requires_grad)


def reduce_sum(x, axis: int | None = None, mask=None) -> Tensor:
    return reduce("sum", x, axis=axis, mask=mask)


def reduce_mean(x, axis: int | None = None, mask=None) -> Tensor:
    return reduce("mean", x, axis=axis, mask=mask)


def gather_rows(table, ids) -> Tensor:
    """Select rows of a 2-D table by id; gradients scatter-add back."""
    table = as_tensor(table)
    tv = table.data
    if tv.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got shape {tv.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat id list, got shape {idx.shape}")
    rows = tv.shape[0]
    bad = (idx < 0) | (idx >= rows)
    if bad.any():
        offender = int(idx[np.argmax(bad)])
        raise IndexError(f"row id {offender} out of range for table with {rows} rows")
    value = tv[idx]

    def pull(g):
        out = np.zeros_like(tv)
        np.add.at(out, idx, g)
        return out

    return _result(value, [(_leaf_id(table), pull)], table.requires_grad)


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse-accumulate gradients of a scalar loss over its record.

    Returns {leaf node id: gradient tensor} covering every leaf that
    requires a gradient; leaves the loss never reached get zeros. The
    record is consumed: using it again raises RecordError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise RecordError("loss tensor is detached from any computation record")
    if tape.spent:
        raise RecordError("backward already ran on this record")

    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.is_leaf:
            continue
        for j, pull in node.parents:
            contrib = pull(g)
            grads[j] = contrib if grads[j] is None else grads[j] + contrib
        grads[i] = None  # free intermediate gradients early

    out: dict[int, Tensor] = {}
    for i, node in enumerate(nodes):
        if node.is_leaf:
            g = grads[i]
            out[i] = Tensor(np.zeros(node.shape) if g is None else g)
    tape.spent = True
    tape.nodes = []
    return out
