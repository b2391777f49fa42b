"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the completion network needs are provided. Layer
normalisation, softmax and GELU are fused nodes with hand-derived
backward passes. Plain numpy arrays mixed into an expression are constants.
"""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a named forward tensor contains NaN or inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite values in forward tensor {name!r}")
        self.tensor_name = name


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0   # make ndarray @ Tensor defer to Tensor.__rmatmul__

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        order: list[Tensor] = []
        seen: set[int] = set()
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if grad is None else grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def abs(self):
        return tabs(self)

    def square(self):
        return mul(self, self)


def _as_tensor(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype.kind == "f" and like.data.dtype.kind == "f":
        arr = arr.astype(like.data.dtype, copy=False)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.data + b.data, _needs(a, b), _parents=(a, b), _backward=backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, a.requires_grad, _parents=(a,), _backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor(ad * bd, _needs(a, b), _parents=(a, b), _backward=backward)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:   # shared weight: fold the batch axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    return Tensor(out, _needs(a, b), _parents=(a, b), _backward=backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, _parents=(a,),
                  _backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor(a.data.reshape(shape), a.requires_grad, _parents=(a,),
                  _backward=lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), a.requires_grad, _parents=(a,),
                  _backward=lambda g: (g.transpose(inv),))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor(np.abs(a.data), a.requires_grad, _parents=(a,), _backward=lambda g: (g * s,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _pair(a, b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out, _needs(a, b), _parents=(a, b), _backward=backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.data.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.data.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor(out, _needs(x, gamma, beta), _parents=(x, gamma, beta), _backward=backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return Tensor(s, x.requires_grad, _parents=(x,), _backward=backward)


_EXP_SAFE = 40.0


def _attn_forward(qs, k, v, p, out):
    np.matmul(qs, np.swapaxes(k, -1, -2), out=p)
    # Cauchy-Schwarz bound on the scores: skip the max shift when exp cannot overflow
    qn = np.sqrt((qs * qs).sum(axis=-1)).max(axis=-1)
    kn = np.sqrt((k * k).sum(axis=-1)).max(axis=-1)
    if not float((qn * kn).max()) < _EXP_SAFE:
        p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p *= 1.0 / p.sum(axis=-1, keepdims=True)
    np.matmul(p, v, out=out)


def _attn_backward(p, out, qs, k, v, g, scale):
    gv = np.swapaxes(p, -1, -2) @ g
    ds = g @ np.swapaxes(v, -1, -2)
    ds -= (g * out).sum(axis=-1, keepdims=True)   # row sums of p * dp equal <g, out>
    ds *= p
    return (ds @ k) * scale, np.swapaxes(ds, -1, -2) @ qs, gv


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v over the last two axes, as one node.

    Inputs with more than three axes are processed one leading index at a
    time so the score matrices stay cache-resident.
    """
    scale = np.asarray(1.0 / np.sqrt(q.data.shape[-1]), dtype=q.data.dtype)
    qs = q.data * scale
    kd, vd = k.data, v.data
    lead = qs.shape[:-2]
    p = np.empty(lead + (qs.shape[-2], kd.shape[-2]), dtype=np.result_type(qs, kd))
    out = np.empty(lead + (qs.shape[-2], vd.shape[-1]), dtype=np.result_type(p, vd))
    chunks = range(len(qs)) if qs.ndim > 3 else [Ellipsis]
    for i in chunks:
        _attn_forward(qs[i], kd[i], vd[i], p[i], out[i])

    def backward(g):
        if qs.ndim <= 3:
            return _attn_backward(p, out, qs, kd, vd, g, scale)
        gq, gk, gv = np.empty_like(qs), np.empty_like(kd), np.empty_like(vd)
        for i in chunks:
            gq[i], gk[i], gv[i] = _attn_backward(p[i], out[i], qs[i], kd[i], vd[i], g[i], scale)
        return gq, gk, gv

    return Tensor(out, _needs(q, k, v), _parents=(q, k, v), _backward=backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    c = np.asarray(_GELU_C, dtype=xd.dtype)
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return Tensor(out, x.requires_grad, _parents=(x,), _backward=backward)


def check_finite(t: Tensor, name: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(name)
    return t
