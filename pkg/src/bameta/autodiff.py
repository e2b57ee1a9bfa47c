"""Reverse-mode automatic differentiation over numpy arrays.

Every backward rule is written with the same differentiable primitives used in
the forward pass, so a gradient computed with ``create_graph=True`` is itself a
graph node and can be differentiated again. This is what makes MAML-style
meta-gradients (and Hessian-vector products) exact.

Example::

    >>> res = grad(lambda t: (t * t).sum(), np.array([3.0]))
    >>> res.value, res.grad
    (9.0, array([6.]))
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradResult",
    "NumericalError",
    "UnsupportedOperation",
    "as_tensor",
    "constant",
    "no_grad",
    "gradients",
    "grad",
    "grad_nested",
    "hvp",
    "exp",
    "log",
    "relu",
    "tanh",
    "clip",
    "logsumexp",
    "maximum_reduce",
    "broadcast_to",
    "stack",
]


class NumericalError(FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, message: str, node_id: Optional[int] = None, op: Optional[str] = None):
        super().__init__(message)
        self.node_id = node_id
        self.op = op


class UnsupportedOperation(TypeError):
    """Raised when a Tensor is fed to an operation the engine does not know."""


_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _enable_grad(flag: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the computation graph: a float64 array plus how it was made."""

    __slots__ = ("data", "parents", "vjp", "op", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple = ()
        self.vjp: Optional[Callable] = None
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.id = next(_node_ids)

    # numpy binary ops defer to our reflected methods; raw ufuncs raise TypeError
    __array_ufunc__ = None

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOperation(
            "implicit conversion of a Tensor to ndarray would silently drop the graph; use .data"
        )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        return float(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise UnsupportedOperation("only constant real exponents are supported")
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return reduce_sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.id = next(_node_ids)
    out.op = op
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by node #{out.id} ({op})", out.id, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.vjp = vjp
        out.requires_grad = True
    else:
        out.parents = ()
        out.vjp = None
        out.requires_grad = False
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, tuple(range(extra)), False)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axes, True)
    return g


# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
        "add",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b))) if b.requires_grad else None
        return (
            _unbroadcast(ga, a.shape) if a.requires_grad else None,
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(a.data / b.data, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 2.0:
        return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),), "square")
    return _make(a.data**p, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        out = _make(np.exp(a.data), (a,), vjp, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (div(g, a),), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, 1.0 - mul(out, out)),)

    out = _make(np.tanh(a.data), (a,), vjp, "tanh")
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")


# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def broadcast_to(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        "broadcast",
    )


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (swapaxes(g, ax1, ax2),), "swapaxes"
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _make(
        np.array(a.data[index], dtype=np.float64),
        (a,),
        lambda g: (_scatter(g, index, in_shape),),
        "getitem",
    )


def _scatter(g, index, shape: tuple) -> Tensor:
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda gg: (getitem(gg, index),), "scatter")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)

    def vjp(g):
        return tuple(getitem(g, (slice(None),) * (axis % g.ndim) + (i,)) for i in range(n))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, vjp, "stack")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise UnsupportedOperation("matmul operands must be at least 2-D; reshape vectors first")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def maximum_reduce(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximizing entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    out = np.max(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = reshape(g, np.expand_dims(out, axis).shape)
        return (mul(g, mask),)

    return _make(out, (a,), vjp, "max")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; the shift by the max is a constant."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out_data = s if keepdims else np.squeeze(s, axis=axis)
    out = None

    def vjp(g):
        lse = out if keepdims else reshape(out, s.shape)
        if not keepdims:
            g = reshape(g, s.shape)
        return (mul(g, exp(a - lse)),)

    out = _make(out_data, (a,), vjp, "logsumexp")
    return out


# backward pass


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack_.append((p, False))
    return order


def gradients(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graph and
    can be differentiated again. Inputs the output does not depend on get zeros.
    """
    if not output.requires_grad:
        return [Tensor(np.zeros(x.shape)) for x in inputs]
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        grad_output = np.ones(output.shape)
    grads = {output.id: as_tensor(grad_output)}
    wanted = {x.id for x in inputs}
    with _enable_grad(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            if node.id not in wanted:
                # interior node: its gradient is consumed here
                del grads[node.id]
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(x.id)
        out.append(Tensor(np.zeros(x.shape)) if g is None else g)
    return out


@dataclass(frozen=True)
class GradResult:
    value: float
    grad: np.ndarray


def grad(f: Callable[[Tensor], Tensor], theta) -> GradResult:
    """Value and gradient of a scalar function of one real vector."""
    x = Tensor(np.array(theta, dtype=np.float64), requires_grad=True)
    with _enable_grad(True):
        y = f(x)
    y = as_tensor(y)
    if y.size != 1:
        raise ValueError(f"f must return a scalar, got shape {y.shape}")
    (g,) = gradients(y, [x])
    return GradResult(float(y.data), g.data.reshape(x.shape).copy())


def grad_nested(f: Callable[[Tensor], Tensor], theta) -> GradResult:
    """Like :func:`grad`, for bodies that take gradients themselves.

    Inner calls must use ``gradients(..., create_graph=True)`` so that the
    outer pass differentiates through them; the result is then exact to
    second order.
    """
    return grad(f, theta)


def hvp(f: Callable[[Tensor], Tensor], theta, v) -> np.ndarray:
    """Hessian-vector product by double backpropagation."""
    v = np.asarray(v, dtype=np.float64)

    def inner(t):
        (g,) = gradients(f(t), [t], create_graph=True)
        return (g * v).sum()

    return grad(inner, theta).grad
