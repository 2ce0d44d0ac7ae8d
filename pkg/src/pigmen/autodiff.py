"""Minimal reverse-mode differentiation over dense float64 tensors (rank <= 2).

The tape records every primitive in construction order, so node ids are a
topological order for free. The one non-standard primitive is
`apply_linear_operator`, which makes an external numerical kernel (anything
exposing apply / apply_transpose) differentiable: the forward pass applies the
operator, the backward pass applies its transpose to the upstream gradient.

Conventions: ReLU'(0) = 0 and sign(0) = 0; scatter_sum accumulates in index
order (fixed left-to-right summation for determinism).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ShapeMismatchError(ValueError):
    pass


@dataclass
class LinearOperatorHandle:
    """External linear operator with an exact transpose application.

    The adjoint identity <apply(u), w> == <u, apply_transpose(w)> is the
    contract that makes the operator usable as a differentiable primitive.
    """

    n_rows: int
    n_cols: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]


class Value:
    """A tensor recorded on a tape; `grad` is populated by Tape.backward."""

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data: np.ndarray, node_id: int, requires_grad: bool):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape


@dataclass
class _Record:
    value: Value
    parents: tuple
    # maps upstream gradient to per-parent contributions (None to skip)
    backward: Optional[Callable]
    # fresh: the contributions are pairwise non-overlapping arrays (they may
    # alias the already-consumed child gradient), so the accumulator may adopt
    # them in place of copying
    fresh: bool


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def _register(self, data, parents=(), backward=None, requires_grad=None,
                  fresh=False) -> Value:
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 2:
            raise ShapeMismatchError(f"rank {data.ndim} tensor not supported")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        value = Value(data, node_id=len(self.records), requires_grad=requires_grad)
        self.records.append(_Record(value, tuple(parents), backward, fresh))
        return value

    def input(self, data) -> Value:
        """Leaf whose gradient will be populated by backward."""
        return self._register(data, requires_grad=True)

    def constant(self, data) -> Value:
        """Leaf excluded from differentiation."""
        return self._register(data, requires_grad=False)

    def backward(self, root: Value) -> None:
        """Reverse sweep from a scalar root; accumulates grads on all leaves."""
        if root.data.size != 1:
            raise ShapeMismatchError(
                f"backward root must be scalar, got shape {root.data.shape}")
        for record in self.records:
            record.value.grad = None
        root.grad = np.ones_like(root.data)
        for record in reversed(self.records):
            out = record.value
            if out.grad is None or record.backward is None or not out.requires_grad:
                continue
            contributions = record.backward(out.grad)
            for parent, contrib in zip(record.parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # copy unless the record guarantees exclusive ownership;
                    # shared/viewed arrays would be corrupted by later +=
                    parent.grad = contrib if record.fresh else np.array(contrib)
                else:
                    parent.grad += contrib


def add(tape: Tape, a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    return tape._register(a.data + b.data, (a, b),
                          lambda g: (g, g.copy()), fresh=True)


def sub(tape: Tape, a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}")
    return tape._register(a.data - b.data, (a, b),
                          lambda g: (g, np.negative(g)), fresh=True)


def mul(tape: Tape, a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")
    return tape._register(a.data * b.data, (a, b),
                          lambda g: (g * b.data, g * a.data), fresh=True)


def scale(tape: Tape, x: Value, c: float) -> Value:
    c = float(c)
    return tape._register(c * x.data, (x,), lambda g: (c * g,), fresh=True)


def square(tape: Tape, x: Value) -> Value:
    return tape._register(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,),
                          fresh=True)


def absolute(tape: Tape, x: Value) -> Value:
    return tape._register(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,),
                          fresh=True)


def relu(tape: Tape, x: Value) -> Value:
    mask = x.data > 0.0
    return tape._register(np.where(mask, x.data, 0.0), (x,),
                          lambda g: (np.where(mask, g, 0.0),), fresh=True)


def linear_layer(tape: Tape, W: Value, b: Value, x: Value) -> Value:
    """x @ W + b with x (n, in), W (in, out), b (out,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatchError(f"linear_layer: x {x.shape} @ W {W.shape}")
    if b.data.shape != (W.shape[1],):
        raise ShapeMismatchError(f"linear_layer: b {b.shape} vs out dim {W.shape[1]}")

    def backward(g):
        return (x.data.T @ g, g.sum(axis=0), g @ W.data.T)

    return tape._register(x.data @ W.data + b.data, (W, b, x), backward,
                          fresh=True)


def concat(tape: Tape, a: Value, b: Value) -> Value:
    """Column-wise concatenation of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(f"concat: {a.shape} vs {b.shape}")
    na = a.shape[1]
    return tape._register(np.concatenate([a.data, b.data], axis=1), (a, b),
                          lambda g: (g[:, :na], g[:, na:]), fresh=True)


def gather_rows(tape: Tape, x: Value, idx: np.ndarray) -> Value:
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeMismatchError("gather_rows expects a rank-2 tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows: index out of bounds")

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return tape._register(x.data[idx], (x,), backward, fresh=True)


def scatter_sum(tape: Tape, x: Value, idx: np.ndarray, n_out: int) -> Value:
    """out[i] = sum of rows k with idx[k] == i, accumulated in index order."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeMismatchError("scatter_sum expects a rank-2 tensor")
    if idx.shape != (x.shape[0],):
        raise ShapeMismatchError(f"scatter_sum: {idx.shape} indices for {x.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= n_out):
        raise IndexError("scatter_sum: index out of bounds")
    out = np.zeros((n_out, x.shape[1]))
    np.add.at(out, idx, x.data)
    return tape._register(out, (x,), lambda g: (g[idx],), fresh=True)


def reduce_sum(tape: Tape, x: Value) -> Value:
    return tape._register(x.data.sum(), (x,),
                          lambda g: (np.broadcast_to(g, x.data.shape).copy(),),
                          fresh=True)


def reduce_mean(tape: Tape, x: Value) -> Value:
    n = x.data.size
    return tape._register(x.data.mean(), (x,),
                          lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
                          fresh=True)


def reshape(tape: Tape, x: Value, shape) -> Value:
    return tape._register(x.data.reshape(shape), (x,),
                          lambda g: (g.reshape(x.data.shape),), fresh=True)


def slice_cols(tape: Tape, x: Value, start: int, stop: int) -> Value:
    if x.data.ndim != 2:
        raise ShapeMismatchError("slice_cols expects a rank-2 tensor")
    if not (0 <= start <= stop <= x.shape[1]):
        raise IndexError(f"slice_cols: [{start}:{stop}] out of bounds for {x.shape}")

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)

    return tape._register(x.data[:, start:stop].copy(), (x,), backward,
                          fresh=True)


def apply_linear_operator(tape: Tape, handle: LinearOperatorHandle, u: Value) -> Value:
    """Differentiable application of an external linear operator.

    Forward computes handle.apply(u); backward routes the upstream gradient
    through handle.apply_transpose, which is exactly the recorded-operations
    derivative of a linear kernel.
    """
    if u.data.ndim != 1 or u.data.shape[0] != handle.n_cols:
        raise ShapeMismatchError(
            f"operator is {handle.n_rows}x{handle.n_cols}, input has shape {u.shape}")
    out = np.asarray(handle.apply(u.data), dtype=np.float64)
    if out.shape != (handle.n_rows,):
        raise ShapeMismatchError(
            f"operator returned shape {out.shape}, expected ({handle.n_rows},)")
    return tape._register(out, (u,),
                          lambda g: (np.asarray(handle.apply_transpose(g)),),
                          fresh=True)


def transpose_handle(handle: LinearOperatorHandle) -> LinearOperatorHandle:
    """The transpose operator: apply and apply_transpose swapped."""
    return LinearOperatorHandle(n_rows=handle.n_cols, n_cols=handle.n_rows,
                                apply=handle.apply_transpose,
                                apply_transpose=handle.apply)


def identity_handle(n: int) -> LinearOperatorHandle:
    return LinearOperatorHandle(n, n, lambda v: v.copy(), lambda v: v.copy())
