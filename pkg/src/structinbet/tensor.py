"""Dense N-d tensors with a reverse-mode gradient tape.

Every array is a numpy buffer of the current default dtype (float32 unless a
:func:`default_dtype` block says otherwise). An operation on inputs that
require gradients records its parents and a closure mapping the output
gradient to input gradients. :meth:`Tensor.backward` replays the closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DTYPE = np.float32


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated, so replaying the same
    tape gives identical results.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_grad(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1 + x * (1 - s))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * _silu_grad(x.data, s),))


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def fn(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype), (x,), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects two (B,C,H,W) tensors")
    return concat([a, b], axis=1)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Inverse of :func:`concat`: slice ``x`` into consecutive chunks along ``axis``."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {x.shape[ax]}")
    out = []
    lo = 0
    for n in sizes:
        out.append(_slice(x, ax, lo, lo + n))
        lo += n
    return out


def _slice(x: Tensor, ax: int, lo: int, hi: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(lo, hi)
    idx = tuple(idx)

    def fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` stored as (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = matmul(x, w) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), w), (w.shape[1],))
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; output shape is ``indices.shape + (E,)``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def fn(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[indices], (table,), fn)


# ---------------------------------------------------------------- image ops


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (B,C,H,W) input with (O,C,kh,kw) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    ph, pw = H + 2 * padding - kh, W + 2 * padding - kw
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    if ph % stride or pw % stride:
        raise ShapeError(f"conv2d: output size not integral for stride {stride}")
    Ho, Wo = ph // stride + 1, pw // stride + 1
    s = stride

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::s, ::s]
        out = np.einsum("oc,bchw->bohw", w.data[:, :, 0, 0], xs, optimize=True)

        def fn1(g):
            gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            gx_s = np.einsum("oc,bohw->bchw", w.data[:, :, 0, 0], g, optimize=True)
            if s == 1:
                gx = gx_s
            else:
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, :, ::s, ::s] = gx_s
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb) if bias is not None else (gx, gw)

        if bias is not None:
            out = out + bias.data[None, :, None, None]
            return _make(np.ascontiguousarray(out), (x, w, bias), fn1)
        return _make(np.ascontiguousarray(out), (x, w), fn1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, fn)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm: gamma/beta must have shape (C,)")
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, H, W)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxh = (g * gamma.data[None, :, None, None]).reshape(B, groups, n)
        xh = xhat.reshape(B, groups, n)
        dx = inv / n * (n * dxh - dxh.sum(axis=2, keepdims=True)
                        - xh * (dxh * xh).sum(axis=2, keepdims=True))
        return dx.reshape(B, C, H, W), gg, gb

    return _make(out, (x, gamma, beta), fn)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def fn(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(g.dtype, copy=False),)

    return _make(out, (x,), fn)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------- helpers


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    return mean_all(square(sub(pred, target)))


def tokens_from_map(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,H*W,C) in raster order."""
    B, C, H, W = x.shape
    return transpose(reshape(x, (B, C, H * W)), (0, 2, 1))


def map_from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    B, N, C = t.shape
    if N != h * w:
        raise ShapeError(f"{N} tokens cannot form a {h}x{w} map")
    return reshape(transpose(t, (0, 2, 1)), (B, C, h, w))


def inv_sqrt(d: int) -> float:
    return 1.0 / math.sqrt(d)
