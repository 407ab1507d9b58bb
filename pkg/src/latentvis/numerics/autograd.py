"""Minimal reverse-mode differentiation over numpy arrays.

Each operation records its parents and a closure mapping the output gradient
to parent gradients.  ``Tensor.backward`` walks the graph in reverse
topological order.  Parameters (:class:`Param`) keep their ``grad`` between
backward calls so gradients accumulate until ``zero_grad``; frozen
parameters never join the graph and so keep an all-zero gradient.

Only the operations the toy model needs are provided, several of them fused
(layer norm, masked softmax, log-softmax) for speed and numerical stability.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "no_grad",
    "is_grad_enabled",
    "constant",
    "concat",
    "embed",
    "layer_norm",
    "masked_softmax",
    "log_softmax",
    "gather_last",
    "gelu",
    "minimum",
    "clip",
    "where",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.data.shape, other.data.shape
        return _op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.data.shape, other.data.shape
        return _op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self.data
        return _op(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        out = a @ b

        def back(g):
            if b.ndim == 2:
                ga = g @ b.T
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return _op(out, (self, other), back)

    def __getitem__(self, key):
        shape = self.data.shape

        fancy = any(
            isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,))
        )

        def back(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, key, g)
            else:
                full[key] = g
            return (full,)

        return _op(self.data[key], (self,), back)

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        old = self.data.shape
        return _op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return _op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        return _op(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    # -- reductions and elementwise ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out = np.exp(self.data)
        return _op(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _op(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _op(out, (self,), lambda g: (g * 0.5 / out,))


class Param(Tensor):
    """A named leaf tensor with a trainable flag and adaptive-optimizer moments."""

    __slots__ = ("name", "frozen", "m", "v")

    def __init__(self, data, name: str = "", trainable: bool = True, frozen: bool = False):
        data = np.array(data, dtype=np.float64)
        super().__init__(data, requires_grad=trainable and not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(data)
        self.m = np.zeros_like(data)
        self.v = np.zeros_like(data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag) and not self.frozen

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _op(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def concat(tensors, axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.data.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, ids.ravel(), g.reshape(-1, shape[1]))
        return (full,)

    return _op(table.data[ids], (table,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis (fused forward and backward)."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = a.shape[-1]
    gd = gain.data

    def back(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return _op(xhat * gd + bias.data, (x, gain, bias), back)


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get zero
    weight.  Every row must keep at least one position."""
    a = x.data
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _op(p, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    a = x.data
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _op(out, (x,), back)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[..., idx]`` elementwise along the last axis (take_along_axis)."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]
    shape = x.data.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _op(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = x.data
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    half = 0.5 * (1.0 + t)
    out = a * half

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return (g * (half + 0.5 * a * (1.0 - t * t) * du),)

    return _op(out, (x,), back)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    a_shape, b_shape = a.data.shape, b.data.shape

    def back(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a_shape),
            _unbroadcast(np.where(cond, 0.0, g), b_shape),
        )

    return _op(np.where(cond, a.data, b.data), (a, b), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    return where(a.data <= b.data, a, b)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero wherever clamping binds."""
    a = x.data
    inside = (a >= lo) & (a <= hi)
    return _op(np.clip(a, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))
