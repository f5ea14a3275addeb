"""Differentiable operations over :class:`Tensor`.

Binary elementwise ops broadcast like numpy. Matrix ops act on the last two
axes and accept leading batch axes. Each op's backward rule is registered in
``BACKWARD_RULES`` under the op name.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import BACKWARD_RULES, ShapeError, Tensor, active_tape

LN_EPS = 1e-5


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], saved=None) -> Tensor:
    t = Tensor._wrap(out, op)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.record(op, inputs, t, saved)
    return t


def _rule(name):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn
    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bwd(saved, g, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bwd(saved, g, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    return _emit("mul", a.data * b.data, (a, b))


hadamard = mul


@_rule("mul")
def _mul_bwd(saved, g, inputs, out):
    a, b = inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero tensor entry")
    return _emit("div", a.data / b.data, (a, b))


@_rule("div")
def _div_bwd(saved, g, inputs, out):
    a, b = inputs
    return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out.data / b.data, b.shape)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), c)


@_rule("scale")
def _scale_bwd(c, g, inputs, out):
    return (g * g.dtype.type(c),)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + a.data.dtype.type(c), (a,))


@_rule("add_scalar")
def _add_scalar_bwd(saved, g, inputs, out):
    return (g,)


def relu(x: Tensor) -> Tensor:
    return _emit("relu", np.maximum(x.data, 0), (x,))


@_rule("relu")
def _relu_bwd(saved, g, inputs, out):
    return (g * (inputs[0].data > 0),)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("silu", x.data * sig, (x,), sig)


@_rule("silu")
def _silu_bwd(sig, g, inputs, out):
    x = inputs[0].data
    return (g * (sig * (1 + x * (1 - sig))),)


def exp(x: Tensor) -> Tensor:
    return _emit("exp", np.exp(x.data), (x,))


@_rule("exp")
def _exp_bwd(saved, g, inputs, out):
    return (g * out.data,)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _emit("log", np.log(x.data), (x,))


@_rule("log")
def _log_bwd(saved, g, inputs, out):
    return (g / inputs[0].data,)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    return _emit("sqrt", np.sqrt(x.data), (x,))


@_rule("sqrt")
def _sqrt_bwd(saved, g, inputs, out):
    return (g / (2.0 * out.data),)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return _emit("clip", np.clip(x.data, lo, hi), (x,), (lo, hi))


@_rule("clip")
def _clip_bwd(bounds, g, inputs, out):
    lo, hi = bounds
    x = inputs[0].data
    return (g * ((x >= lo) & (x <= hi)),)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


@_rule("sum")
def _sum_bwd(saved, g, inputs, out):
    axis, keepdims = saved
    x = inputs[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mean_rows(x: Tensor) -> Tensor:
    """Average over the token axis: (..., n, d) -> (..., d)."""
    return mean(x, axis=-2)


def sq_norm(x: Tensor) -> Tensor:
    return sum(mul(x, x))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,))


@_rule("reshape")
def _reshape_bwd(saved, g, inputs, out):
    return (g.reshape(inputs[0].shape),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _emit("permute", np.transpose(x.data, axes), (x,), axes)


@_rule("permute")
def _permute_bwd(axes, g, inputs, out):
    return (np.transpose(g, np.argsort(axes)),)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    return _emit("index", np.array(x.data[key]), (x,), key)


@_rule("index")
def _index_bwd(key, g, inputs, out):
    gx = np.zeros(inputs[0].shape, dtype=g.dtype)
    gx[key] += g
    return (gx,)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the token axis (second to last)."""
    return index(x, (Ellipsis, slice(start, stop), slice(None)))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (default: the row/token axis)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit("concat", out, tensors, (ax, sizes))


@_rule("concat")
def _concat_bwd(saved, g, inputs, out):
    ax, sizes = saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def split(x: Tensor, sizes: Sequence[int], axis: int = -2) -> list[Tensor]:
    ax = axis % x.ndim
    if builtins.sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {x.shape[ax]}")
    parts, start = [], 0
    for n in sizes:
        key = [slice(None)] * x.ndim
        key[ax] = slice(start, start + n)
        parts.append(index(x, tuple(key)))
        start += n
    return parts


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id outside the embedding table")
    return _emit("embedding", table.data[ids], (table,), ids)


@_rule("embedding")
def _embedding_bwd(ids, g, inputs, out):
    gt = np.zeros(inputs[0].shape, dtype=g.dtype)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
    return (gt,)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b))


@_rule("matmul")
def _matmul_bwd(saved, g, inputs, out):
    a, b = inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (
        None if ga is None else _unbroadcast(ga, a.shape),
        None if gb is None else _unbroadcast(gb, b.shape),
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- row kernels

def _as_rows(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by the row max."""
    y = kernels.softmax_rows(_as_rows(x.data)).reshape(x.shape)
    return _emit("softmax", y, (x,))


softmax_rows = softmax


@_rule("softmax")
def _softmax_bwd(saved, g, inputs, out):
    gx = kernels.softmax_rows_backward(_as_rows(out.data), _as_rows(g.astype(out.data.dtype)))
    return (gx.reshape(out.shape),)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _emit("log_softmax", z - lse, (x,))


@_rule("log_softmax")
def _log_softmax_bwd(saved, g, inputs, out):
    p = np.exp(out.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm over fewer than 2 features is degenerate")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    dt = x.data.dtype
    y, xhat, rstd = kernels.layer_norm_forward(
        _as_rows(x.data),
        np.ascontiguousarray(gain.data, dtype=dt),
        np.ascontiguousarray(bias.data, dtype=dt),
        float(eps),
    )
    return _emit("layer_norm", y.reshape(x.shape), (x, gain, bias), (xhat, rstd))


@_rule("layer_norm")
def _layer_norm_bwd(saved, g, inputs, out):
    xhat, rstd = saved
    x, gain, _ = inputs
    dt = xhat.dtype
    gx, ggain, gbias = kernels.layer_norm_backward(
        _as_rows(g.astype(dt)), xhat, rstd, np.ascontiguousarray(gain.data, dtype=dt)
    )
    return gx.reshape(x.shape), ggain, gbias


def normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """L2-normalize along the last axis."""
    # float64 so tiny float32 vectors do not underflow to a zero norm
    x64 = x.data.astype(np.float64)
    norm = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise ZeroDivisionError("cannot normalize a zero-norm vector")
    return _emit("normalize", (x64 / norm).astype(x.dtype), (x,), norm)


@_rule("normalize")
def _normalize_bwd(norm, g, inputs, out):
    y = out.data
    return (((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm).astype(y.dtype),)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis (batched over leading axes)."""
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError("cosine_sim needs equal widths")
    return sum(mul(normalize(u), normalize(v)), axis=-1)


def sdp_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    logits = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(logits), v)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row logits."""
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(targets.size), targets] = 1.0
    return scale(sum(mul(log_softmax(logits), Tensor(onehot))), -1.0 / targets.size)
