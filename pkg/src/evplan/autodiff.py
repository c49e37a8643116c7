"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each op records its parents and a closure mapping the output gradient to
parent gradients. Only the operations the planner network needs are provided;
attention and layer norm are fused for speed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "_buffer")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, grad_buffer: Optional[np.ndarray] = None):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.grad = grad_buffer
        self._buffer = grad_buffer is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self._buffer:
            self.grad += g
        elif self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=float))
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is not None and p.requires_grad:
                    p._accumulate(g)
            node.grad = None  # interior gradients are not kept

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x: Tensor) -> Tensor:
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * special.expit(x.data),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU; smooth everywhere, which keeps finite differences honest."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), back)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data > floor
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def gammaln(x: Tensor) -> Tensor:
    return _make(special.gammaln(x.data), (x,), lambda g: (g * special.digamma(x.data),))


def digamma(x: Tensor) -> Tensor:
    return _make(special.digamma(x.data), (x,), lambda g: (g * special.polygamma(1, x.data),))


# --- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def take(x: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices)

    def back(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, indices, axis=axis), (x,), back)


# --- reductions ------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - out_k),)

    return _make(out, (x,), back)


def masked_max(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Max over ``axis`` restricted to ``mask``; rows with no valid entry give 0."""
    mask = np.broadcast_to(mask, x.shape)
    filled = np.where(mask, x.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    any_valid = mask.any(axis=axis)
    out = np.where(any_valid, np.take_along_axis(filled, np.expand_dims(arg, axis), axis).squeeze(axis), 0.0)

    def back(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g * any_valid, axis), axis)
        return (grad,)

    return _make(out, (x,), back)


# --- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., i] @ w[i, o] + b[o]."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    din, dout = w.shape

    def back(g):
        g2 = g.reshape(-1, dout)
        gx = g @ w.data.T
        gw = x.data.reshape(-1, din).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def back(g):
        gg = unbroadcast(g * xhat, gamma.shape)
        gb = unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[np.ndarray], n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (..., Lq, d); k, v: (..., Lk, d) with leading axes broadcastable to q's.
    key_mask: bool, broadcastable to (..., Lk); True marks usable keys. Queries
    with no usable key return zeros.
    """
    d = q.shape[-1]
    dh = d // n_heads
    scale = float(1.0 / np.sqrt(dh))

    def split(t):
        return np.swapaxes(t.reshape(t.shape[:-1] + (n_heads, dh)), -2, -3)  # (..., h, L, dh)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    S = (Q @ np.swapaxes(K, -1, -2)) * scale  # (..., h, Lq, Lk)
    if key_mask is not None:
        m = np.expand_dims(np.expand_dims(key_mask, -2), -3)  # (..., 1, 1, Lk)
        S = np.where(m, S, -np.inf)
        has_key = m.any(axis=-1, keepdims=True)
        S = np.where(has_key, S, 0.0)
    smax = S.max(axis=-1, keepdims=True)
    P = np.exp(S - smax)
    P /= P.sum(axis=-1, keepdims=True)
    if key_mask is not None:
        P = P * has_key
    O = P @ V
    out = np.swapaxes(O, -2, -3).reshape(O.shape[:-3] + (O.shape[-2], d))

    def back(g):
        G = split(g)
        dV = np.swapaxes(P, -1, -2) @ G
        dP = G @ np.swapaxes(V, -1, -2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = np.swapaxes(dS, -1, -2) @ Q

        def merge(t, shape):
            t = np.swapaxes(t, -2, -3)
            t = t.reshape(t.shape[:-2] + (d,))
            return unbroadcast(t, shape)

        return merge(dQ, q.shape), merge(dK, k.shape), merge(dV, v.shape)

    return _make(out, (q, k, v), back)
