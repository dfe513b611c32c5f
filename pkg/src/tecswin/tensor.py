"""Dense tensors with tape-based reverse-mode autodiff.

Values live in numpy arrays (float32 unless a float64 array is passed in,
which the gradient checker uses). Every op records its parents and a
backward closure; ``Tensor.backward`` replays them in reverse topological
order. Only first-order gradients are supported.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Gradients accumulate into existing ``.grad`` buffers; callers zero
        them between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        if not np.isfinite(self.data).all():
            raise FloatingPointError("loss is not finite")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b`` (no arithmetic, bitwise)."""
    cond = np.asarray(cond, dtype=bool)
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(cond, g, zero), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, zero, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and layout


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), bw)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` along axis 0 (scatter-add gradient)."""
    index = np.asarray(index)
    out = table.data[index]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _make(out, (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(x.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return _make(out, (x,), lambda g: (np.roll(g, back, axes),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., Cin] @ w[Cin, Cout] + b[Cout]``; a 1x1 convolution on NHWC maps."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input channels {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out += b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def conv_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel channel projection of an NHWC map."""
    if x.ndim != 4:
        raise ShapeError(f"conv_1x1 expects [B,H,W,C], got {x.shape}")
    return linear(x, w, b)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def gelu(x: Tensor) -> Tensor:
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    out = (d * cdf).astype(d.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + d * pdf)).astype(d.dtype),)

    return _make(out, (x,), bw)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)

    def bw(g):
        return (g * s * (1.0 + d * (1.0 - s)),)

    return _make(d * s, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_ACTIVATIONS = {"gelu": gelu, "silu": silu, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm: parameter shape {p.shape} != ({c},)")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = rstd * (gx - gxhat_mean - xhat * proj)
        red = tuple(range(g.ndim - 1))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _make(out.astype(d.dtype, copy=False), parents, bw)


# ---------------------------------------------------------------------------
# spatial rearrangements (NHWC)


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """[B,H,W,C*r*r] -> [B,rH,rW,C]; input channel ``c*r*r + i*r + j`` lands at offset (i, j)."""
    b, h, w, c = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by {r * r}")
    co = c // (r * r)
    y = reshape(x, (b, h, w, co, r, r))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (b, h * r, w * r, co))


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    b, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by {r}")
    y = reshape(x, (b, h // r, r, w // r, r, c))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (b, h // r, w // r, c * r * r))


def window_partition(x: Tensor, win: int) -> Tensor:
    """[B,H,W,C] -> [B*(H/win)*(W/win), win*win, C], windows in row-major order."""
    b, h, w, c = x.shape
    if h % win or w % win:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {win}")
    y = reshape(x, (b, h // win, win, w // win, win, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (-1, win * win, c))


def window_reverse(windows: Tensor, win: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // win) * (w // win))
    y = reshape(windows, (b, h // win, w // win, win, win, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, h, w, c))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of an NHWC map: pixel (i, j) moves to (i+dy, j+dx)."""
    if dy == 0 and dx == 0:
        return x
    return roll(x, (dy, dx), (1, 2))
