"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one node to a thread-local tape; :func:`backward`
walks that tape in reverse insertion order, which is a valid topological order
because a node's inputs always exist before the node is recorded.

Set ``RANKSSM_DEBUG=1`` to check every op output for NaN/Inf. Outside debug
mode only user-created tensors and the loss passed to :func:`backward` are
checked.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEBUG = os.environ.get("RANKSSM_DEBUG", "0") not in ("", "0", "false", "False")


@dataclass
class Node:
    op: str
    inputs: tuple
    out: "Tensor"
    backward_fn: Callable
    saved: dict = field(default_factory=dict)


class GradTape:
    """Ordered record of differentiable ops for one thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, _check=True):
        arr = np.array(data, dtype=np.float64) if _check else data
        if _check:
            _check_finite(arr, f"tensor {name or ''}".strip())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, _check=False)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn, op, **saved) -> Tensor:
    out = Tensor(data, _check=False)
    if DEBUG:
        _check_finite(data, f"output of {op}")
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = tape.record(Node(op, tuple(inputs), out, backward_fn, saved))
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad`` on
    parameters between steps. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    tape = get_tape()
    if loss.tape_id is None or not tape.nodes:
        raise ValueError("loss is not connected to any recorded op")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape_id is None:
                    # leaf
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float64, copy=True)
                    else:
                        t.grad = t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
    finally:
        for node in tape.nodes:
            node.out.tape_id = None
        tape.clear()


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    ad = a.data
    return _make(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def silu(a):
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),), "silu")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax_lastdim(a):
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def logsumexp_lastdim(a):
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s
    return _make(out, (a,), lambda g: (p * g[..., None],), "logsumexp")


def rmsnorm(x, weight, eps=1e-5):
    """x / sqrt(mean(x^2) + eps) * weight over the last axis."""
    if eps <= 0:
        raise ValueError(f"rmsnorm eps must be positive, got {eps}")
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def bw(g):
        dxhat = g * wd
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return dx, unbroadcast(g * xhat, wd.shape)

    return _make(xhat * wd, (x, weight), bw, "rmsnorm")


def depthwise_causal_conv(x, weight, bias):
    """Per-channel causal FIR filter over time.

    x: (L, C); weight: (C, K); bias: (C,). out[t, c] = bias[c] +
    sum_j weight[c, j] * x[t - K + 1 + j, c], zero-padded on the left.
    """
    L, Cn = x.shape
    K = weight.shape[1]
    xd, wd = x.data, weight.data
    xp = np.zeros((L + K - 1, Cn))
    xp[K - 1 :] = xd
    out = np.broadcast_to(bias.data, (L, Cn)).copy()
    for j in range(K):
        out += wd[:, j] * xp[j : j + L]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wd)
        for j in range(K):
            dxp[j : j + L] += wd[:, j] * g
            dw[:, j] = np.sum(g * xp[j : j + L], axis=0)
        return dxp[K - 1 :], dw, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw, "dwconv")
