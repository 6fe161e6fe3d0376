"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run tape: every differentiable operation appends a record to the
active :class:`Graph`, and :func:`backward` replays the tape in reverse
order, visiting each record once. Gradients accumulate into ``Tensor.grad``
(never overwritten), so several losses may be backpropagated jointly or one
at a time with identical results.

Broadcasting is restricted to scalars and trailing-dimension expansion; the
single ``_unbroadcast`` helper is the audit point for all binary backward
rules.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NumericDomainError",
    "active_graph",
    "new_graph",
    "no_grad",
    "apply_op",
    "matmul",
    "softmax",
    "logsumexp",
    "max_over_axis",
    "gaussian_gram",
    "backward",
    "sgd_step",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericDomainError(ValueError):
    """Input outside an operation's numeric domain (e.g. log of a non-positive value)."""


_node_ids = itertools.count()


class Tensor:
    """Dense float64 array with an optional accumulated-gradient buffer.

    Tensors are immutable once created, except that :func:`sgd_step` updates
    parameter buffers in place. ``grad`` is ``None`` until a backward pass
    reaches the tensor; ``None`` is equivalent to an all-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def detach(self) -> "Tensor":
        """A new leaf holding a copy of the value, cut off from the graph."""
        return Tensor(self.data.copy())

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def _non_scalar(t: Tensor):
    raise ShapeError(f"item() on non-scalar tensor of shape {t.data.shape}")


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of operation records; every record's inputs precede it."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []


_active_graph = Graph()
_grad_enabled = True


def active_graph() -> Graph:
    return _active_graph


def new_graph() -> Graph:
    """Start a fresh tape. Existing tensors stay valid as graph leaves."""
    global _active_graph
    _active_graph = Graph()
    return _active_graph


@contextmanager
def no_grad():
    """Disable tape recording (read-only evaluation of a trained model)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _active_graph.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def apply_op(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
             backward_fn: Callable) -> Tensor:
    """Record a custom differentiable operation on the active tape.

    `backward_fn` maps the output gradient to one gradient (or None) per
    input; fused loss kernels are registered through this hook so they are
    graded by the same finite-difference suite as the built-in ops.
    """
    return _apply(op, inputs, out_data, backward_fn)


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb:
        return
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`: the exact inverse of numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data.shape, b.data.shape, "add")
    sa, sb = a.data.shape, b.data.shape
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data.shape, b.data.shape, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _apply("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data.shape, b.data.shape, "mul")
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _apply("scale", (x,), x.data * c, lambda g: (g * c,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _apply("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        idx = tuple(int(i) for i in np.argwhere(x.data <= 0.0)[0])
        raise NumericDomainError(f"log: non-positive input at index {idx}")
    d = x.data
    return _apply("log", (x,), np.log(d), lambda g: (g / d,))


def _sigmoid_vals(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|)) to avoid overflow."""
    x = _as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    s = _sigmoid_vals(d)
    return _apply("softplus", (x,), out, lambda g: (g * s,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_vals(x.data)
    return _apply("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _apply("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    return _apply("square", (x,), d * d, lambda g: (g * 2.0 * d,))


# -- matmul ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not align")
    return _apply("matmul", (a, b), ad @ bd,
                  lambda g: (g @ bd.T, ad.T @ g))


# -- reductions ----------------------------------------------------------------


def _check_axis(shape: tuple, axis: int | None, op: str) -> None:
    if axis is None:
        if int(np.prod(shape)) == 0:
            raise ShapeError(f"{op}: reduction over empty tensor")
        return
    if not -len(shape) <= axis < len(shape):
        raise ShapeError(f"{op}: axis {axis} invalid for shape {shape}")
    if shape[axis] == 0:
        raise ShapeError(f"{op}: empty axis {axis} for shape {shape}")


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x.data.shape, axis, "sum")
    shape = x.data.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape),)

    return _apply("sum", (x,), out, backward_fn)


def tmean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x.data.shape, axis, "mean")
    shape = x.data.shape
    n = float(np.prod(shape) if axis is None else shape[axis])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape),)

    return _apply("mean", (x,), out, backward_fn)


def max_over_axis(x, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max values along `axis` plus argmax indices (indices are not differentiated)."""
    x = _as_tensor(x)
    _check_axis(x.data.shape, axis, "max")
    idx = np.argmax(x.data, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.data.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(idx, axis),
                          np.expand_dims(np.asarray(g), axis), axis=axis)
        return (out,)

    return _apply("max", (x,), vals, backward_fn), idx


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x.data.shape, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _apply("softmax", (x,), out, backward_fn)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x.data.shape, axis, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = e / s
    if not keepdims:
        out = out.squeeze(axis)

    def backward_fn(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (gg * weights,)

    return _apply("logsumexp", (x,), out, backward_fn)


# -- kernel ---------------------------------------------------------------------


def gaussian_gram(a, b, bandwidth: float) -> Tensor:
    """Gram matrix G[i,j] = exp(-||a_i - b_j||^2 / (2 bandwidth^2)).

    Differentiable with respect to both inputs; rows of `a` and `b` must have
    equal feature dimension.
    """
    if bandwidth <= 0:
        raise ValueError(f"gaussian_gram: bandwidth must be positive, got {bandwidth}")
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[1]:
        raise ShapeError(f"gaussian_gram: shapes {ad.shape} and {bd.shape} do not align")
    sq = (ad * ad).sum(axis=1)[:, None] + (bd * bd).sum(axis=1)[None, :] - 2.0 * (ad @ bd.T)
    np.maximum(sq, 0.0, out=sq)
    if a is b:
        np.fill_diagonal(sq, 0.0)
    gram = np.exp(-sq / (2.0 * bandwidth * bandwidth))
    coef = -1.0 / (bandwidth * bandwidth)

    def backward_fn(g):
        w = g * gram
        da = coef * (w.sum(axis=1)[:, None] * ad - w @ bd)
        db = coef * (w.sum(axis=0)[:, None] * bd - w.T @ ad)
        return (da, db)

    return _apply("gaussian_gram", (a, b), gram, backward_fn)


# -- backward & optimizer ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor reachable from `loss`.

    Must be called while the graph that produced `loss` is still the active
    one; each call adds to existing gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    flows: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {loss.node_id: loss}
    for node in reversed(_active_graph.nodes):
        g = flows.get(node.output.node_id)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None:
                continue
            prev = flows.get(t.node_id)
            flows[t.node_id] = gt if prev is None else prev + gt
            touched[t.node_id] = t
    for nid, t in touched.items():
        if t.requires_grad:
            g = flows[nid]
            t.grad = np.array(g) if t.grad is None else t.grad + g


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place p <- p - lr * grad for every parameter, then zero the grads."""
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be non-negative, got {lr}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or p.node_id} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
