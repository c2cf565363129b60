"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive executed while it is active and
replays them backwards::

    with Tape() as tape:
        loss = (conv2d(x, w, b, padding=1) * y).sum()
    tape.backward(loss)
    w.grad  # same shape as w.data

Outside of an active tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, UsageError

_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array with optional gradient tracking.

    Tensors produced by ops are never mutated afterwards; only leaves
    (parameters) are updated in place by the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._is_leaf

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _scalar_error(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


_ACTIVE: list = []


class Tape:
    """Ordered record of executed primitives.

    Ops are appended in execution order, so inputs always precede the ops
    that consume them and a reverse walk is a valid topological order.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss):
        return backward(self, loss)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(name, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    out._is_leaf = False
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].ops.append(_Op(name, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor):
    """Propagate d(loss)/d(.) through ``tape``.

    Every leaf seen on the tape with ``requires_grad`` gets its ``.grad``
    overwritten; leaves that do not influence ``loss`` receive zeros.
    Returns the list of those leaves.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for op in tape.ops:
        for t in op.inputs:
            if t.requires_grad and t._is_leaf:
                leaves[id(t)] = t
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    return list(leaves.values())


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(x, y):
    x = _as_tensor(x, getattr(y, "data", None))
    y = _as_tensor(y, x.data)
    xs, ys = x.shape, y.shape
    return _record("add", (x, y), x.data + y.data,
                   lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def sub(x, y):
    x = _as_tensor(x, getattr(y, "data", None))
    y = _as_tensor(y, x.data)
    xs, ys = x.shape, y.shape
    return _record("sub", (x, y), x.data - y.data,
                   lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)))


def mul(x, y):
    x = _as_tensor(x, getattr(y, "data", None))
    y = _as_tensor(y, x.data)
    xd, yd = x.data, y.data
    return _record("mul", (x, y), xd * yd,
                   lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)))


def div(x, y):
    x = _as_tensor(x, getattr(y, "data", None))
    y = _as_tensor(y, x.data)
    xd, yd = x.data, y.data
    out = xd / yd
    return _record("div", (x, y), out,
                   lambda g: (_unbroadcast(g / yd, xd.shape), _unbroadcast(-g * out / yd, yd.shape)))


def power(x, exponent: float):
    xd = x.data
    p = float(exponent)
    return _record("power", (x,), xd ** p, lambda g: (g * p * xd ** (p - 1.0),))


def exp(x):
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x):
    xd = x.data
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


def relu(x):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    pos = x.data > 0
    return _record("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype),
                   lambda g: (g * pos,))


# -- reductions and shape ----------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), out, bwd)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis=1):
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def concat_channels(xs):
    """Concatenate rank-4 tensors along the channel axis."""
    for t in xs:
        if t.ndim != 4:
            raise DimensionError(f"concat_channels expects rank-4 tensors, got {t.shape}")
    return concat(xs, axis=1)


def matmul(x, w):
    """``x @ w.T`` for 2-D operands, the affine-map building block."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"matmul shapes {xd.shape} and {wd.shape}.T do not align")
    return _record("matmul", (x, w), xd @ wd.T, lambda g: (g @ wd, g.T @ xd))


# -- channel-wise softmax -------------------------------------------------

def softmax_channels(x):
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax", (x,), s, bwd)


def log_softmax_channels(x):
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _record("log_softmax", (x,), out, lambda g: (g - s * g.sum(axis=1, keepdims=True),))


# -- convolution family -----------------------------------------------------

def conv2d(x, w, b=None, dilation=1, padding=0, stride=1):
    out, cols = kernels.conv2d_forward(x.data, w.data, None if b is None else b.data,
                                       dilation, padding, stride)
    xs, wd = x.shape, w.data

    def bwd(g):
        gx, gw, gb = kernels.conv2d_backward(g, xs, wd, cols, dilation, padding, stride)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, bwd)


def conv_transpose2d(x, w, b=None, stride=2, padding=1, output_padding=1, dilation=1):
    out = kernels.conv_transpose2d_forward(x.data, w.data, None if b is None else b.data,
                                           stride, padding, output_padding, dilation)
    xd, wd = x.data, w.data

    def bwd(g):
        gx, gw, gb = kernels.conv_transpose2d_backward(g, xd, wd, stride, padding,
                                                       output_padding, dilation)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv_transpose2d", inputs, out, bwd)


def maxpool2d(x, k=2):
    out, arg = kernels.maxpool2d_forward(x.data, k)
    return _record("maxpool2d", (x,), np.ascontiguousarray(out),
                   lambda g: (kernels.maxpool2d_backward(g, arg, k),))


def upsample2d(x, k=2):
    """Nearest-neighbour upsampling by an integer factor."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _record("upsample2d", (x,), out,
                   lambda g: (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm2d(x, gamma, beta, state: BatchNormState | None = None, train=True,
                eps=1e-5, momentum=0.1):
    """Per-channel normalization.

    In train mode the batch statistics are used and ``state`` (if given) is
    updated with the unbiased batch variance; eval mode normalizes with the
    running statistics.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d on {c} channels got gamma {gamma.shape} and beta {beta.shape}"
        )
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if train:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state is not None:
            unbiased = var * m / max(m - 1, 1)
            state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
            state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        if state is None:
            raise UsageError("batchnorm2d in eval mode needs running statistics")
        mu, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gd, bd = gamma.data, beta.data
    out = xhat * gd.reshape(1, c, 1, 1) + bd.reshape(1, c, 1, 1)

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd.reshape(1, c, 1, 1)
        if train:
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _record("batchnorm2d", (x, gamma, beta), out.astype(xd.dtype, copy=False), bwd)


# -- oracle -------------------------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` may be a :class:`Tensor` (perturbed in place and restored) or an
    array. Each element costs two evaluations of ``f``.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    if isinstance(x, Tensor) and not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    arr = x.data if isinstance(x, Tensor) else np.array(x, dtype=np.float64)
    arg = x if isinstance(x, Tensor) else arr
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)

    def value():
        v = f(arg)
        return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value()
        flat[i] = orig - eps
        lo = value()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
