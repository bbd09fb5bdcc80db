"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in this package that needs a gradient flows through the ops in
this module.  Design constraints:

* float64 everywhere, so finite-difference checks can use tight tolerances;
* deterministic: identical inputs produce bit-identical outputs and grads;
* the recorded graph lives on the output tensors themselves (each op closes
  over its parents), and ``Tensor.backward`` replays it in reverse
  topological order exactly once per node.

A single forward/backward graph must stay on one thread.  Ops on distinct
tensors are safe to run concurrently.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "tsum",
    "tmax",
    "exp",
    "log",
    "sqrt",
    "erf",
    "sigmoid",
    "gelu",
    "relu",
    "softplus",
    "concat",
    "take_rows",
    "where",
    "stop_gradient",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "clip_values",
    "l2_normalize",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    ``grad`` stays ``None`` until ``backward`` deposits something, so a
    parameter that never participated in a loss reads back as exactly zero
    via :meth:`grad_array`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def grad_array(self):
        """Gradient as an ndarray; zeros if backward never reached this tensor."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor.

        Visits each recorded node exactly once, in reverse topological
        order.  ``grad`` defaults to ones (the usual scalar-loss case).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
        topo = _toposort(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum-reduce ``g`` back to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    """Wrap an op result; records the graph only when a parent needs grads."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=tuple(parents))
        out._backward = backward(out)
        return out
    return Tensor(data)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return run

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return run

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data),
                                       b.data.shape))

        return run

    return _make(data, (a, b), bw)


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p

    def bw(out):
        def run(g):
            _accum(a, g * p * a.data ** (p - 1.0))

        return run

    return _make(data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bw(out):
        def run(g):
            _accum(a, g * out.data)

        return run

    return _make(data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def bw(out):
        def run(g):
            _accum(a, g / a.data)

        return run

    return _make(data, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def bw(out):
        def run(g):
            _accum(a, g * 0.5 / out.data)

        return run

    return _make(data, (a,), bw)


def erf(a):
    a = _as_tensor(a)
    data = _np_erf(a.data)
    coef = 2.0 / math.sqrt(math.pi)

    def bw(out):
        def run(g):
            _accum(a, g * coef * np.exp(-a.data * a.data))

        return run

    return _make(data, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(out):
        def run(g):
            _accum(a, g * out.data * (1.0 - out.data))

        return run

    return _make(data, (a,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf-based) GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    u = _np_erf(a.data * _INV_SQRT2)
    data = 0.5 * a.data * (1.0 + u)

    def bw(out):
        def run(g):
            local = 0.5 * (1.0 + u) \
                + a.data * _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            _accum(a, g * local)

        return run

    return _make(data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(out):
        def run(g):
            _accum(a, g * (a.data > 0.0))

        return run

    return _make(data, (a,), bw)


def softplus(a):
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bw(out):
        def run(g):
            s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                         np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
            _accum(a, g * s)

        return run

    return _make(data, (a,), bw)


# -- shape / structure -----------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bw(out):
        def run(g):
            _accum(a, g.reshape(a.data.shape))

        return run

    return _make(data, (a,), bw)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def bw(out):
        def run(g):
            _accum(a, _unbroadcast(g, a.data.shape))

        return run

    return _make(data, (a,), bw)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def bw(out):
        def run(g):
            _accum(a, np.swapaxes(g, ax1, ax2))

        return run

    return _make(data, (a,), bw)


def _is_basic_index(idx):
    if isinstance(idx, (int, np.integer, slice)) or idx is Ellipsis or idx is None:
        return True
    if isinstance(idx, tuple):
        return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis
                   or i is None for i in idx)
    return False


def getitem(a, idx):
    a = _as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(out):
        def run(g):
            full = np.zeros_like(a.data)
            if basic:
                # basic indexing never repeats elements: direct add is safe
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            _accum(a, full)

        return run

    return _make(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(out):
        def run(g):
            start = 0
            for t, s in zip(tensors, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + s)
                _accum(t, g[tuple(sl)])
                start += s

        return run

    return _make(data, tuple(tensors), bw)


def take_rows(a, indices, axis=0):
    """Advanced row selection along ``axis`` (embedding lookup, reordering).

    ``indices`` may be any integer ndarray; repeated indices accumulate in
    the backward pass.
    """
    a = _as_tensor(a)
    idx = np.asarray(indices)
    data = np.take(a.data, idx, axis=axis)

    def bw(out):
        def run(g):
            full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                moved = np.moveaxis(full, axis, 0)
                np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            _accum(a, full)

        return run

    return _make(data, (a,), bw)


def where(cond, a, b):
    """Elementwise select; ``cond`` is a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.where(cond, a.data, b.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

        return run

    return _make(data, (a, b), bw)


def stop_gradient(a):
    a = _as_tensor(a)
    return Tensor(a.data)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def run(g):
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

        return run

    return _make(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bw(out):
        def run(g):
            full_max = a.data.max(axis=axis, keepdims=True)
            hit = a.data == full_max
            # split gradient evenly across ties for determinism
            share = hit / hit.sum(axis=axis, keepdims=True)
            gg = g if keepdims or axis is None else np.expand_dims(g, axis)
            _accum(a, share * gg)

        return run

    return _make(data, (a,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes.

    1-D operands follow numpy semantics: they are promoted to a row/column
    matrix and the corresponding axis is squeezed from the result.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    prod = np.matmul(ad, bd)
    data = prod
    if b_vec:
        data = data[..., 0]
    if a_vec:
        data = data[..., 0] if b_vec else data[..., 0, :]

    def bw(out):
        def run(g):
            if a_vec and b_vec:
                gg = g[..., None, None]
            elif a_vec:
                gg = g[..., None, :]
            elif b_vec:
                gg = g[..., :, None]
            else:
                gg = g
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(gg, np.swapaxes(bd, -1, -2)),
                                  ad.shape)
                _accum(a, ga.reshape(a.data.shape) if a_vec else ga)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), gg),
                                  bd.shape)
                _accum(b, gb.reshape(b.data.shape) if b_vec else gb)

        return run

    return _make(data, (a, b), bw)


# -- stabilized composites ---------------------------------------------------


def softmax(a, axis=-1):
    """Softmax along ``axis`` with max-subtraction for overflow safety."""
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run(g):
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accum(a, out.data * (g - dot))

        return run

    return _make(y, (a,), bw)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(out):
        def run(g):
            gsum = g.sum(axis=axis, keepdims=True)
            _accum(a, g - np.exp(out.data) * gsum)

        return run

    return _make(y, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    """log(sum(exp(x))) with a detached max shift; gradient is softmax(x)."""
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.data.ndim + axis
    m = a.data.max(axis=ax, keepdims=True)
    inner = tsum(exp(add(a, Tensor(-m))), axis=ax, keepdims=True)
    out = add(log(inner), Tensor(m))
    if not keepdims:
        out = reshape(out, tuple(s for i, s in enumerate(out.shape) if i != ax))
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant row maps to ``beta`` exactly (the zero numerator wins against
    the eps-guarded denominator).  Fused primitive: forward and backward are
    hand-rolled for speed; the backward is the standard three-term form.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if x.data.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    data = xhat * gamma.data + beta.data

    def bw(out):
        def run(g):
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2))
            red = tuple(range(g.ndim - 1))
            dg = (g * xhat).sum(axis=red) if red else g * xhat
            db = g.sum(axis=red) if red else g
            _accum(gamma, _unbroadcast(dg, gamma.data.shape))
            _accum(beta, _unbroadcast(db, beta.data.shape))

        return run

    return _make(data, (x, gamma, beta), bw)


def clip_values(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through inside the interval."""
    x = _as_tensor(x)
    out = where(x.data > hi, Tensor(np.full_like(x.data, hi)), x)
    return where(out.data < lo, Tensor(np.full_like(out.data, lo)), out)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = _as_tensor(x)
    n = sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, n)
