"""Minimal tape-based reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled and
any input requires them, records a closure that maps the output gradient
to input gradients.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.  Operations broadcast like numpy; gradients
are summed back to the input shape.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True
_kink_monitor: list | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def kink_monitor():
    """Collect min |input| of every LeakyReLU evaluated inside the block."""
    global _kink_monitor
    prev = _kink_monitor
    _kink_monitor = []
    try:
        yield _kink_monitor
    finally:
        _kink_monitor = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operators
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim == 0 and not b.requires_grad:
        bd = bd.astype(ad.dtype) if ad.dtype.kind == "f" else bd

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def square(a):
    a = as_tensor(a)
    ad = a.data

    def backward(g):
        return (2.0 * ad * g,)

    return _make(ad * ad, (a,), backward)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                a2 = ad.reshape(-1, ad.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), backward)


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx):
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    basic = not any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def take(a, indices, axis):
    """Select the same ``indices`` along ``axis`` (gradient scatters back)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = a.shape, a.dtype
    ax = axis % a.ndim

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=ax), (a,), backward)


def gather_rows(a, indices):
    """Per-sample row gather: a [B, N, D], indices [B, n] -> [B, n, D]."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = a.shape, a.dtype
    batch = np.arange(shape[0])[:, None]

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, (batch, indices), g)
        return (out,)

    return _make(a.data[batch, indices], (a,), backward)


def scatter_rows(a, indices, n_rows, fill):
    """Inverse of gather_rows: place a [B, n, D] rows at ``indices`` of a
    [B, n_rows, D] array whose other rows are taken from ``fill`` ([D] or
    broadcastable Tensor)."""
    a, fill = as_tensor(a), as_tensor(fill)
    indices = np.asarray(indices, dtype=np.intp)
    b, n, d = a.shape
    batch = np.arange(b)[:, None]
    mask = np.ones((b, n_rows), dtype=bool)
    mask[batch, indices] = False
    out = np.empty((b, n_rows, d), dtype=a.dtype)
    out[...] = np.broadcast_to(fill.data, (b, n_rows, d))
    out[batch, indices] = a.data
    fshape = fill.shape

    def backward(g):
        ga = g[batch, indices]
        gf = None
        if fill.requires_grad:
            gfull = g * mask[..., None]
            gf = unbroadcast(gfull, fshape)
        return ga, gf

    return _make(out, (a, fill), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def leaky_relu(a, alpha):
    a = as_tensor(a)
    x = a.data
    if _kink_monitor is not None and x.size:
        _kink_monitor.append(float(np.abs(x).min()))

    def backward(g):
        return (kernels.leaky_relu_grad(x, g, alpha),)

    return _make(kernels.leaky_relu(x, alpha), (a,), backward)


def gelu(a):
    a = as_tensor(a)
    x = a.data

    def backward(g):
        return (kernels.gelu_grad(x, g),)

    return _make(kernels.gelu(x), (a,), backward)


def softmax(a):
    """Softmax over the last axis (row-max stabilised)."""
    a = as_tensor(a)
    y = kernels.softmax(a.data)

    def backward(g):
        return (kernels.softmax_grad(y, g),)

    return _make(y, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    y, mu, rstd = kernels.layer_norm(x, gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_grad(g, x, mu, rstd, gamma.data)
        return gx, gg, gb

    return _make(y, (a, gamma, beta), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; logits [B, K], integer labels [B]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    logp = kernels.log_softmax(logits.data)
    b = logp.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def dual(fn):
    """Let an op written on Tensors also accept plain arrays.

    If no positional or keyword argument is a Tensor the op runs without
    recording a tape and array results are unwrapped; otherwise Tensors
    are returned untouched.
    """
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, Tensor) for a in args) or any(
            isinstance(v, Tensor) for v in kwargs.values()
        ):
            return fn(*args, **kwargs)
        with no_grad():
            out = fn(*args, **kwargs)
        return _unwrap(out)

    return wrapper


def _unwrap(out):
    if isinstance(out, Tensor):
        return out.data
    if isinstance(out, tuple):
        return tuple(_unwrap(o) for o in out)
    return out
