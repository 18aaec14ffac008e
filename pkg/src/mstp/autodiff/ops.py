"""Differentiable operations on Tensors.

Broadcasting is deliberately narrow. `add` accepts same-shape operands, a
scalar on either side, or a 1-D bias matching the trailing axis; `mul`
accepts same-shape or scalar. Anything else raises ShapeError naming both
shapes, rather than silently following numpy's broadcast rules. Ops that
need another alignment (per-row weights, per-channel gains) exist as their
own primitives below.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DegenerateDistributionError, ShapeError
from .tensor import Tensor, as_tensor, make_op

__all__ = [
    "add", "sub", "neg", "mul", "div", "reciprocal", "matmul", "relu", "gelu",
    "exp", "log", "sum", "mean", "softmax", "layernorm", "concat", "reshape",
    "transpose", "slice_rows", "embedding", "keep_top_k", "scale_rows",
    "scale_channels", "cross_entropy_logits",
]


def _sum_to_scalar(g: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(g.sum(dtype=np.float64)).astype(dtype)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.ndim == 0:
        def backward(g):
            return g, _sum_to_scalar(g, b.dtype)
    elif a.ndim == 0:
        def backward(g):
            return _sum_to_scalar(g, a.dtype), g
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        # trailing-axis bias; numpy's pairwise summation keeps f32 sums tight
        def backward(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes).astype(b.dtype, copy=False)
    elif a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        def backward(g):
            axes = tuple(range(g.ndim - 1))
            return g.sum(axis=axes).astype(a.dtype, copy=False), g
    else:
        raise ShapeError(
            f"add supports same-shape, scalar, or trailing-axis bias operands; got {a.shape} and {b.shape}"
        )
    return make_op(a.data + b.data, (a, b), backward, "add")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_op(-x.data, (x,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g * b.data, g * a.data
    elif b.ndim == 0:
        def backward(g):
            return g * b.data, _sum_to_scalar(g * a.data, b.dtype)
    elif a.ndim == 0:
        def backward(g):
            return _sum_to_scalar(g * b.data, a.dtype), g * a.data
    else:
        raise ShapeError(f"mul supports same-shape or scalar operands; got {a.shape} and {b.shape}")
    return make_op(a.data * b.data, (a, b), backward, "mul")


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data

    def backward(g):
        return (-g * out * out,)

    return make_op(out.astype(x.dtype, copy=False), (x,), backward, "reciprocal")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        scale = np.asarray(b)
        if scale.ndim != 0:
            raise ShapeError(f"div by a non-Tensor expects a scalar, got shape {scale.shape}")
        return mul(a, float(1.0 / scale))
    return mul(a, reciprocal(b))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul is 2-D only; got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    need_a = a.requires_grad or a.node is not None
    need_b = b.requires_grad or b.node is not None

    def backward(g):
        return (g @ b.data.T if need_a else None,
                a.data.T @ g if need_b else None)

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # derivative at exactly 0 is taken as 0

    def backward(g):
        return (g * mask,)

    return make_op(np.where(mask, x.data, 0), (x,), backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dx,)

    return make_op(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_op(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return make_op(np.log(x.data), (x,), backward, "log")


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(ax % ndim for ax in axis)


def sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes if axis is not None else None, dtype=np.float64)
    out = np.asarray(out).astype(x.dtype)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, x.shape).astype(x.dtype).copy(),)

    return make_op(out, (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise ShapeError(f"mean over an empty axis, shape {x.shape}, axis {axis}")
    out = x.data.sum(axis=axes if axis is not None else None, dtype=np.float64) / count
    out = np.asarray(out).astype(x.dtype)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        scaled = (ge / count).astype(x.dtype, copy=False)
        return (np.broadcast_to(scaled, x.shape).copy(),)

    return make_op(out, (x,), backward, "mean")


# ---------------------------------------------------------------------------
# normalisations


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`, tolerant of -inf entries (they map to exact 0).

    Rows with no finite entry at all have no mass to normalise and raise
    DegenerateDistributionError. The shift-and-exponentiate arithmetic runs
    in float64 so the outputs sum to 1 within 1e-6 for any finite input.
    """
    x = as_tensor(x)
    ax = axis % x.ndim if x.ndim else 0
    xd = x.data.astype(np.float64, copy=False)
    finite = np.isfinite(xd)
    if not finite.any(axis=ax).all():
        raise DegenerateDistributionError("softmax input has a slice with no finite entries")
    if np.isposinf(xd).any() or np.isnan(xd).any():
        raise ContractError("softmax input must not contain +inf or NaN")
    shift = np.max(np.where(finite, xd, -np.inf), axis=ax, keepdims=True)
    e = np.exp(xd - shift)
    e = np.where(finite, e, 0.0)
    y64 = e / e.sum(axis=ax, keepdims=True)
    y = y64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * y64).sum(axis=ax, keepdims=True)
        return ((y64 * (g64 - dot)).astype(x.dtype),)

    return make_op(y, (x,), backward, "softmax")


def layernorm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalisation along one axis (no affine part)."""
    x = as_tensor(x)
    ax = axis % x.ndim
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=ax, keepdims=True)
    xm = xd - mu
    var = (xm * xm).mean(axis=ax, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    y64 = xm * ivar
    n = x.shape[ax]

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gm = g64.mean(axis=ax, keepdims=True)
        gy = (g64 * y64).mean(axis=ax, keepdims=True)
        dx = ivar * (g64 - gm - y64 * gy)
        return (dx.astype(x.dtype),)

    return make_op(y64.astype(x.dtype), (x,), backward, "layernorm")


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ax = axis % ts[0].ndim if ts[0].ndim else 0
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise ShapeError(f"concat rank mismatch: {ts[0].shape} vs {t.shape}")
        for d in range(t.ndim):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat off-axis mismatch: {ts[0].shape} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=ax))

    return make_op(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}: {err}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_op(out, (x,), backward, "reshape")


def transpose(x, axes: Optional[tuple] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.ndim}")
    inverse = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0; the backward pass scatters into zeros."""
    x = as_tensor(x)
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}, {stop}) out of range for shape {x.shape}")

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return make_op(x.data[start:stop].copy(), (x,), backward, "slice_rows")


def embedding(table, indices) -> Tensor:
    """Gather rows of `table` (V, d) by an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"embedding index out of range for table with {table.shape[0]} rows")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return make_op(table.data[idx].copy(), (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# routing / gating primitives


def keep_top_k(x, k: int) -> Tensor:
    """Keep the k largest entries along the last axis, set the rest to -inf.

    Ties keep the lowest index. Gradients flow only through kept positions;
    the -inf fill is treated as a constant.
    """
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("keep_top_k needs at least a 1-D input")
    n = x.shape[-1]
    if not isinstance(k, (int, np.integer)) or k < 1 or k > n:
        raise ContractError(f"k must be an integer in [1, {n}], got {k!r}")
    if not np.isfinite(x.data).all():
        raise ContractError("keep_top_k input must be finite")
    # stable argsort of the negated values: equal entries keep ascending index
    order = np.argsort(-x.data, axis=-1, kind="stable")
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    out = np.where(mask, x.data, np.array(-np.inf, dtype=x.dtype))

    def backward(g):
        return (np.where(mask, g, 0).astype(x.dtype, copy=False),)

    return make_op(out, (x,), backward, "keep_top_k")


def scale_rows(x, w) -> Tensor:
    """Multiply each row of `x` (m, d) by the matching entry of `w` (m,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows expects (m, d) and (m,), got {x.shape} and {w.shape}")

    def backward(g):
        return g * w.data[:, None], (g * x.data).sum(axis=1, dtype=np.float64).astype(w.dtype)

    return make_op(x.data * w.data[:, None], (x, w), backward, "scale_rows")


def scale_channels(x, w) -> Tensor:
    """Multiply a channel-major volume by per-channel gains.

    Accepts (C, *spatial) with w (C,), or a batched (B, C, *spatial) with
    w (B, C).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim == 1 and x.ndim >= 2 and x.shape[0] == w.shape[0]:
        expand = (slice(None),) + (None,) * (x.ndim - 1)
        spatial_axes = tuple(range(1, x.ndim))
    elif w.ndim == 2 and x.ndim >= 3 and x.shape[:2] == w.shape:
        expand = (slice(None), slice(None)) + (None,) * (x.ndim - 2)
        spatial_axes = tuple(range(2, x.ndim))
    else:
        raise ShapeError(f"scale_channels expects (C,...) with (C,) or (B,C,...) with (B,C); got {x.shape} and {w.shape}")
    we = w.data[expand]

    def backward(g):
        dw = (g * x.data).sum(axis=spatial_axes, dtype=np.float64).astype(w.dtype)
        return g * we, dw

    return make_op(x.data * we, (x, w), backward, "scale_channels")


def cross_entropy_logits(logits, target: int) -> Tensor:
    """- log softmax(logits)[target] for a single 1-D logit vector.

    Fused so the backward pass is the numerically clean `probs - onehot`.
    """
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a 1-D logit vector, got {logits.shape}")
    n = logits.shape[0]
    t = builtins.int(target)
    if not 0 <= t < n:
        raise ContractError(f"target {t} out of range for {n} classes")
    z = logits.data.astype(np.float64)
    shift = z.max()
    e = np.exp(z - shift)
    denom = e.sum()
    probs = e / denom
    loss = np.log(denom) + shift - z[t]

    def backward(g):
        d = probs.copy()
        d[t] -= 1.0
        return ((d * float(g)).astype(logits.dtype),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy_logits")
