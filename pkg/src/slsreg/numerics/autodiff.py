"""Tape-style reverse-mode differentiation over dense float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' adjoints.  Nodes carry a creation index drawn
from a global counter, so parents always have a smaller index than their
children and a reverse sort by index is a valid backward order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Operand lies outside the domain of the operation (e.g. log of a negative)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node of the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "index", "requires_grad")
    __array_priority__ = 100.0

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.index = next(_counter)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite values in {what} (op={self.op})")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _make(value, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn, op)
    return Tensor(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant real exponent."""
    a = tensor(a)
    av = a.value
    if not float(exponent).is_integer() and np.any(av < 0):
        raise DomainError("fractional power of a negative value")
    out = av**exponent

    def backward(g):
        return (g * exponent * av ** (exponent - 1),)

    return _make(out, (a,), backward, "pow")


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` for a constant ``c``; subgradient 0 at ties."""
    a = tensor(a)
    av = a.value
    mask = av > c

    def backward(g):
        return (g * mask,)

    return _make(np.maximum(av, c), (a,), backward, "max_const")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = tensor(a), tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _make(np.where(mask, a.value, b.value), (a, b), backward, "where")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = tensor(a)
    av = a.value
    if np.any(av < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def softplus(a) -> Tensor:
    a = tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)

    def backward(g):
        return (g * _sigmoid(av),)

    return _make(out, (a,), backward, "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a) -> Tensor:
    a = tensor(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a) -> Tensor:
    a = tensor(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


# ---------------------------------------------------------------------------
# reductions, linear algebra, shape manipulation
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, key) -> Tensor:
    """Basic or integer-array indexing (``a[key]``)."""
    a = tensor(a)
    shape = a.shape
    out = a.value[key]

    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def backward(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "take")


def concatenate(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, backward, "concat")


def stack(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    return concatenate([expand_dims(t, axis) for t in ts], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = tensor(a)
    shape = list(a.shape)
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(ax, 1)
    return reshape(a, tuple(shape))


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), backward, "logsumexp")


def min_(a, axis: int = -1) -> Tensor:
    """Hard minimum along ``axis``; the gradient goes to the first argmin."""
    a = tensor(a)
    idx = np.argmin(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), backward, "min")


def sort_last(a) -> Tensor:
    """Sort along the last axis; adjoints follow the permutation."""
    a = tensor(a)
    order = np.argsort(a.value, axis=-1, kind="stable")
    out = np.take_along_axis(a.value, order, axis=-1)

    def backward(g):
        full = np.zeros_like(g)
        np.put_along_axis(full, order, g, axis=-1)
        return (full,)

    return _make(out, (a,), backward, "sort")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = tensor(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward, "layer_norm")


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity in eval mode or when ``rate == 0``."""
    a = tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an RNG stream")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def stop_gradient(a) -> Tensor:
    return Tensor(tensor(a).value)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate adjoints from a scalar ``root``.

    Returns a map from every leaf that requires a gradient to its adjoint and
    also stores the adjoint on ``leaf.grad``.  If ``params`` is given, leaves
    not reached by the graph get a zero adjoint.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    root.check_finite("loss")

    nodes: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.index in nodes or not node.requires_grad:
            continue
        nodes[node.index] = node
        stack_.extend(node.parents)

    adjoints: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for idx in sorted(nodes, reverse=True):
        node = nodes[idx]
        g = adjoints.pop(idx, None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.index in adjoints:
                adjoints[parent.index] = adjoints[parent.index] + pg
            else:
                adjoints[parent.index] = pg

    if params is not None:
        for p in params:
            leaves.setdefault(p, np.zeros_like(p.value))
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


def logdet(a) -> Tensor:
    """Batched log-determinant of positive-definite matrices over the last two axes."""
    a = tensor(a)
    sign, out = np.linalg.slogdet(a.value)
    if np.any(sign <= 0):
        raise DomainError("logdet of a matrix that is not positive definite")
    inv_t = np.swapaxes(np.linalg.inv(a.value), -1, -2)

    def backward(g):
        return (np.asarray(g)[..., None, None] * inv_t,)

    return _make(out, (a,), backward, "logdet")
