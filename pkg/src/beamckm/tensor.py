"""Reverse-mode autodiff over dense numpy arrays.

Every differentiable value is a TensorNode holding a numpy array and, once
`backward` has run, a same-shape gradient. Ops append an OpRecord to the
output node; `backward` linearizes the acyclic record graph and sweeps it
once in reverse, accumulating into `.grad`. 64-bit arrays are the default
(finite-difference checks need the headroom); training code passes float32
arrays explicitly and ops preserve the input dtype.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording, e.g. inside sampling loops."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class OpRecord:
    """Producing operation of a non-leaf node: inputs + vector-Jacobian product."""

    __slots__ = ("name", "inputs", "vjp")

    def __init__(self, name: str, inputs: tuple["TensorNode", ...],
                 vjp: Callable[[Array], Sequence[Array | None]]):
        self.name = name
        self.inputs = inputs
        self.vjp = vjp


class TensorNode:
    """N-d value plus lazily allocated gradient, optionally graph-connected."""

    __slots__ = ("values", "grad", "requires_grad", "op_record")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op_record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def detach(self) -> "TensorNode":
        return TensorNode(self.values)

    def reset_grad(self) -> None:
        self.grad = None

    def grad_or_zero(self) -> Array:
        """Gradient if materialized, else zeros (a leaf the loss never touched)."""
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = self.op_record.name if self.op_record else ("param" if self.requires_grad else "leaf")
        return f"TensorNode(shape={self.shape}, dtype={self.dtype}, {tag})"

    # arithmetic sugar; python numbers go through scale/shift so float32
    # graphs are not promoted to float64
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, as_node(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_node(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, as_node(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(neg(self), float(other))
        return sub(as_node(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)


def as_node(x) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    return TensorNode(x)


def _record(name: str, values: Array, inputs: tuple[TensorNode, ...],
            vjp: Callable[[Array], Sequence[Array | None]]) -> TensorNode:
    out = TensorNode(values)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out.op_record = OpRecord(name, inputs, vjp)
    return out


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    out = a.values + b.values
    return _record("add", out, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: TensorNode, b: TensorNode) -> TensorNode:
    out = a.values - b.values
    return _record("sub", out, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: TensorNode, b: TensorNode) -> TensorNode:
    av, bv = a.values, b.values
    return _record("mul", av * bv, (a, b),
                   lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)))


def neg(a: TensorNode) -> TensorNode:
    return _record("neg", -a.values, (a,), lambda g: (-g,))


def scale(a: TensorNode, c: float) -> TensorNode:
    return _record("scale", a.values * c, (a,), lambda g: (g * c,))


def shift(a: TensorNode, c: float) -> TensorNode:
    return _record("shift", a.values + c, (a,), lambda g: (g,))


def pow_scalar(a: TensorNode, p: float) -> TensorNode:
    av = a.values
    return _record("pow", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a: TensorNode) -> TensorNode:
    out = np.exp(a.values)
    return _record("exp", out, (a,), lambda g: (g * out,))


def clamp(a: TensorNode, lo: float, hi: float) -> TensorNode:
    av = a.values
    out = np.clip(av, lo, hi)
    mask = (av >= lo) & (av <= hi)
    return _record("clamp", out, (a,), lambda g: (g * mask,))


def tsum(a: TensorNode, axis=None, keepdims: bool = False) -> TensorNode:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape),)

    return _record("sum", out, (a,), vjp)


def tmean(a: TensorNode, axis=None, keepdims: bool = False) -> TensorNode:
    n = a.values.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    out = a.values.mean(axis=axis, keepdims=keepdims)
    scale = 1.0 / float(n)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g * scale, a.shape).astype(a.dtype, copy=False),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape) * scale,)

    return _record("mean", out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape / structure primitives


def reshape(a: TensorNode, shape) -> TensorNode:
    old = a.shape
    return _record("reshape", a.values.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def transpose(a: TensorNode, axes) -> TensorNode:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.values.transpose(axes), (a,),
                   lambda g: (g.transpose(inv),))


def concat(nodes: Sequence[TensorNode], axis: int) -> TensorNode:
    vals = [n.values for n in nodes]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", out, tuple(nodes), vjp)


def slice_axis(a: TensorNode, axis: int, start: int, stop: int) -> TensorNode:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g: Array):
        gx = np.zeros(a.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _record("slice", a.values[idx], (a,), vjp)


def gather_rows(a: TensorNode, idx) -> TensorNode:
    """Select rows along axis 0 (duplicates allowed); backward scatter-adds."""
    idxa = np.asarray(idx, dtype=np.int64)

    def vjp(g: Array):
        gx = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(gx, idxa, g)
        return (gx,)

    return _record("gather_rows", a.values[idxa], (a,), vjp)


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul expects ndim >= 2 on both sides")
    out = av @ bv

    def vjp(g: Array):
        ga = g @ bv.swapaxes(-1, -2)
        gb = av.swapaxes(-1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# backward sweep


def _toposort(root: TensorNode) -> list[TensorNode]:
    order: list[TensorNode] = []
    seen: set[int] = set()
    stack: list[tuple[TensorNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op_record is not None:
            for inp in node.op_record.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order  # inputs before outputs


def backward(loss: TensorNode) -> None:
    """Accumulate d(loss)/d(node) into `.grad` of every reachable requires_grad node.

    `loss` must be scalar. Repeated calls without `reset_grad` accumulate.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.op_record is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node.op_record.vjp(g)
        for inp, gi in zip(node.op_record.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flowing:
                flowing[key] = flowing[key] + gi
            else:
                flowing[key] = gi
        # intermediates also expose their grad when it was materialized
        node.grad = g if node.grad is None else node.grad + g
