"""A small reverse-mode automatic differentiation engine over numpy arrays.

Tensors record the operation that produced them together with a closure
that maps the output gradient to gradients for each parent. ``backward``
walks the graph in reverse topological order and accumulates gradients into
:class:`Parameter` leaves only; intermediate gradients are discarded.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised by :func:`backward` when the loss is NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never receive gradient."""

    __slots__ = ("grad", "trainable", "name")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.data = np.array(self.data, copy=True)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output. ``backward(g)`` returns one gradient (or None) per parent.

    This is also the extension point for user-defined differentiable ops.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.op == "leaf" and not a.requires_grad and a.data.dtype != b.data.dtype and a.data.ndim == 0:
        a = Tensor(a.data.astype(b.data.dtype))
    if b.op == "leaf" and not b.requires_grad and a.data.dtype != b.data.dtype and b.data.ndim == 0:
        b = Tensor(b.data.astype(a.data.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    return make_op(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        "maximum",
    )


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_op(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = 1.0 / (1.0 + np.exp(-x))
    return make_op(out, (a,), lambda g: (g * sig,), "softplus")


def cosh(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.cosh(x), (a,), lambda g: (g * np.sinh(x),), "cosh")


def sinh(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.sinh(x), (a,), lambda g: (g * np.cosh(x),), "sinh")


def acosh_clamped(a) -> Tensor:
    """``acosh(max(x, 1))``; zero gradient where the clamp is active."""
    a = as_tensor(a)
    x = a.data
    active = x > 1.0
    xc = np.where(active, x, 1.0)

    def bw(g):
        denom = np.sqrt(np.where(active, xc * xc - 1.0, 1.0))
        return (np.where(active, g / denom, 0.0),)

    return make_op(np.arccosh(xc), (a,), bw, "acosh")


_SERIES_CUTOFF = 1e-3


def sinhc_sqrt(a) -> Tensor:
    """``sinh(sqrt(s)) / sqrt(s)`` for ``s >= 0`` (negative inputs clamp to 0), smooth at 0."""
    a = as_tensor(a)
    s = np.maximum(a.data, 0.0)
    small = s < _SERIES_CUTOFF
    r = np.sqrt(np.where(small, 1.0, s))
    val = np.where(small, 1.0 + s / 6.0 + s * s / 120.0 + s**3 / 5040.0, np.sinh(r) / r)

    def bw(g):
        d_big = (r * np.cosh(r) - np.sinh(r)) / (2.0 * r**3)
        d_small = 1.0 / 6.0 + s / 60.0 + s * s / 1680.0 + s**3 / 90720.0
        return (g * np.where(small, d_small, d_big) * (a.data >= 0),)

    return make_op(val.astype(a.dtype), (a,), bw, "sinhc_sqrt")


def cosh_sqrt(a) -> Tensor:
    """``cosh(sqrt(s))`` for ``s >= 0``, smooth at 0."""
    a = as_tensor(a)
    s = np.maximum(a.data, 0.0)
    r = np.sqrt(s)
    val = np.cosh(r)

    def bw(g):
        small = s < _SERIES_CUTOFF
        rr = np.where(small, 1.0, r)
        sinhc = np.where(small, 1.0 + s / 6.0 + s * s / 120.0, np.sinh(rr) / rr)
        return (g * 0.5 * sinhc * (a.data >= 0),)

    return make_op(val.astype(a.dtype), (a,), bw, "cosh_sqrt")


def acosh_ratio(a) -> Tensor:
    """``acosh(b) / sqrt(b^2 - 1)`` for ``b >= 1`` (smaller inputs clamp to 1), smooth at 1."""
    a = as_tensor(a)
    b = np.maximum(a.data, 1.0)
    u = b - 1.0
    small = u < _SERIES_CUTOFF
    bb = np.where(small, 2.0, b)
    big_val = np.arccosh(bb) / np.sqrt(bb * bb - 1.0)
    series = 1.0 - u / 3.0 + 2.0 * u**2 / 15.0 - 2.0 * u**3 / 35.0 + 8.0 * u**4 / 315.0
    val = np.where(small, series, big_val)

    def bw(g):
        d_big = (1.0 - bb * big_val) / (bb * bb - 1.0)
        d_small = -1.0 / 3.0 + 4.0 * u / 15.0 - 6.0 * u**2 / 35.0 + 32.0 * u**3 / 315.0
        return (g * np.where(small, d_small, d_big),)

    return make_op(val.astype(a.dtype), (a,), bw, "acosh_ratio")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return make_op(out if keepdims else np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def pad_last(a, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    if left == 0 and right == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    n = a.shape[-1]
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[..., left : left + n],), "pad")


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather along axis 1: ``a`` is (N, L, D), ``index`` is (N, M) -> (N, M, D)."""
    a = as_tensor(a)
    length = a.shape[1]
    out = np.take_along_axis(a.data, index[:, :, None], axis=1)
    return make_op(
        out,
        (a,),
        lambda g: (_kernels.gather_rows_backward(np.ascontiguousarray(g), index, length),),
        "take_rows",
    )


def unfold1d(a, k: int, padding: int = 0, dilation: int = 1) -> Tensor:
    """Sliding windows over the last axis of (B, C, T) -> (B, T_out, C, k)."""
    a = as_tensor(a)
    x = a.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    span = dilation * (k - 1) + 1
    if span > x.shape[2]:
        raise ValueError(f"kernel span {span} exceeds padded length {x.shape[2]}")
    win = sliding_window_view(x, span, axis=2)[..., ::dilation]  # (B, C, T_out, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3))
    length = x.shape[2]
    t = a.shape[2]

    def bw(g):
        full = _kernels.fold1d(np.ascontiguousarray(g), length, dilation)
        return (full[:, :, padding : padding + t],)

    return make_op(cols, (a,), bw, "unfold1d")


def unfold2d(a, kh: int, kw: int, pad_h: int = 0, pad_w: int = 0) -> Tensor:
    """Stride-1 patches of (B, C, H, W) -> (B, H_out, W_out, C, kh, kw)."""
    a = as_tensor(a)
    x = a.data
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    hp, wp = x.shape[2], x.shape[3]
    h, w = a.shape[2], a.shape[3]

    def bw(g):
        full = _kernels.fold2d(np.ascontiguousarray(g), hp, wp)
        return (full[:, :, pad_h : pad_h + h, pad_w : pad_w + w],)

    return make_op(cols, (a,), bw, "unfold2d")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable trainable Parameter."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = _toposort(loss)
    if not np.all(np.isfinite(loss.data)):
        for node in order:
            if not np.all(np.isfinite(node.data)):
                name = getattr(node, "name", "") or node.op
                raise NonFiniteError(f"non-finite value first produced by '{name}' (shape {node.shape})")
        raise NonFiniteError("loss is non-finite")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
