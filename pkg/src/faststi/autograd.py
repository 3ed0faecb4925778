"""Minimal reverse-mode differentiation over the operators the network uses.

Every op records a closure that pushes the output gradient to its parents;
``Tensor.backward`` replays the closures in reverse topological order. Inputs
that are plain arrays are treated as constants.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        # never mutate in place: g may alias another node's buffer
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def _track(*xs) -> bool:
    return _GRAD_ENABLED and any(_live(x) for x in xs)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _result(out, parents, backward):
    if not _track(*parents):
        return Tensor(out)
    live = tuple(p for p in parents if isinstance(p, Tensor))
    return Tensor(out, _parents=live, _backward=backward)


def _live(x) -> bool:
    return isinstance(x, Tensor) and (x.requires_grad or bool(x._parents))


def _push(x, g):
    if _live(x):
        x._accumulate(g)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    da, db = _data(a), _data(b)

    def backward(g):
        if _live(a):
            a._accumulate(unbroadcast(g, da.shape))
        if _live(b):
            b._accumulate(unbroadcast(g, db.shape))

    return _result(da + db, (a, b), backward)


def mul(a, b):
    da, db = _data(a), _data(b)

    def backward(g):
        if _live(a):
            a._accumulate(unbroadcast(g * db, da.shape))
        if _live(b):
            b._accumulate(unbroadcast(g * da, db.shape))

    return _result(da * db, (a, b), backward)


def scale(a, c: float):
    def backward(g):
        _push(a, g * c)

    return _result(_data(a) * c, (a,), backward)


def reshape(a, shape):
    da = _data(a)

    def backward(g):
        _push(a, g.reshape(da.shape))

    return _result(da.reshape(shape), (a,), backward)


def split_last(a, sizes):
    """Split along the last axis into consecutive chunks."""
    da = _data(a)
    bounds = np.cumsum([0, *sizes])
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(da)
            full[..., lo:hi] = g
            _push(a, full)
        outs.append(_result(da[..., lo:hi], (a,), backward))
    return outs


def linear(x, w, b=None):
    dx, dw = _data(x), _data(w)
    flat = dx.reshape(-1, dx.shape[-1])
    out = flat @ dw
    if b is not None:
        out += _data(b)
    out = out.reshape(*dx.shape[:-1], dw.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        _push(x, (g2 @ dw.T).reshape(dx.shape))
        if isinstance(w, Tensor):
            _push(w, flat.T @ g2)
        if b is not None:
            _push(b, g2.sum(axis=0))

    return _result(out, (x, w) if b is None else (x, w, b), backward)


def node_mix(x, matrix: np.ndarray):
    """Apply a constant (N, N) matrix along the node axis of (..., N, C)."""
    dx = _data(x)

    def backward(g):
        _push(x, matrix.T @ g)

    return _result(matrix @ dx, (x,), backward)


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-_data(x)))

    def backward(g):
        _push(x, g * s * (1.0 - s))

    return _result(s, (x,), backward)


def tanh(x):
    t = np.tanh(_data(x))

    def backward(g):
        _push(x, g * (1.0 - t * t))

    return _result(t, (x,), backward)


def silu(x):
    dx = _data(x)
    s = 1.0 / (1.0 + np.exp(-dx))

    def backward(g):
        _push(x, g * s * (1.0 + dx * (1.0 - s)))

    return _result(dx * s, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalise over the last (channel) axis."""
    dx = _data(x)
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    dgam = _data(gamma)

    def backward(g):
        gx = g * dgam
        _push(x, inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        flat_g = g.reshape(-1, g.shape[-1])
        _push(gamma, (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0))
        _push(beta, flat_g.sum(axis=0))

    return _result(xhat * dgam + _data(beta), (x, gamma, beta), backward)


def _to_heads(a: np.ndarray, axis: str, heads: int) -> np.ndarray:
    b, l, n, c = a.shape
    a = a.reshape(b, l, n, heads, c // heads)
    if axis == "time":
        return a.transpose(0, 2, 3, 1, 4)  # (B, N, h, L, d)
    return a.transpose(0, 1, 3, 2, 4)  # (B, L, h, N, d)


def _from_heads(a: np.ndarray, axis: str, shape) -> np.ndarray:
    if axis == "time":
        a = a.transpose(0, 3, 1, 2, 4)
    else:
        a = a.transpose(0, 1, 3, 2, 4)
    return a.reshape(shape)


def attention(q, k, v, axis: str, heads: int):
    """Multi-head scaled dot-product attention over the time or node axis.

    q, k, v have shape (B, L, N, C) and are already projected.
    """
    dq, dk, dv = _data(q), _data(k), _data(v)
    shape = dq.shape
    d = shape[-1] // heads
    qh, kh, vh = (_to_heads(a, axis, heads) for a in (dq, dk, dv))
    scores = qh @ kh.swapaxes(-1, -2) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = _from_heads(attn @ vh, axis, shape)

    def backward(g):
        gh = _to_heads(g, axis, heads)
        _push(v, _from_heads(attn.swapaxes(-1, -2) @ gh, axis, shape))
        ga = gh @ vh.swapaxes(-1, -2)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) / np.sqrt(d)
        _push(q, _from_heads(gs @ kh, axis, shape))
        _push(k, _from_heads(gs.swapaxes(-1, -2) @ qh, axis, shape))

    return _result(out, (q, k, v), backward)


def masked_mse(pred, target: np.ndarray, mask: np.ndarray):
    """Mean of (pred - target)^2 over entries where ``mask`` is set."""
    dp = _data(pred)
    m = mask.astype(np.float64)
    count = max(m.sum(), 1.0)
    diff = (dp - target) * m

    def backward(g):
        _push(pred, g * 2.0 * diff / count)

    return _result(np.array((diff * diff).sum() / count), (pred,), backward)
