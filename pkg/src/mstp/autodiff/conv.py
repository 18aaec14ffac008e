"""3-D convolution and nearest-neighbour upsampling.

conv3d computes cross-correlation (no kernel flip), the convention used by
every deep-learning framework. The forward pass lowers the input to a
patch matrix (im2col via a strided window view) so the contraction is one
BLAS matmul; the weight gradient reuses that matrix, and the input gradient
scatters one matmul per kernel offset back into a zero-padded buffer, which
avoids building a second giant column matrix.

Inputs may be (C, D, H, W) or batched (B, C, D, H, W); the batch is folded
into the rows of the patch matrix, so a batched call costs one GEMM, not B.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_op


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate `x` with kernels `w` (C_out, C_in, kd, kh, kw).

    stride must be 1 or 2 (applied to all three axes), kernel extents must
    be odd, and the output must keep at least one voxel per axis.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    bias: Optional[Tensor] = None if b is None else as_tensor(b)

    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C,D,H,W) or (B,C,D,H,W), got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-D (C_out,C_in,kd,kh,kw), got {w.shape}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be non-negative, got {padding}")

    xd = x.data if batched else x.data[None]
    bsz, c_in = xd.shape[:2]
    c_out, c_in_w, kd, kh, kw = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv3d channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    if any(k % 2 == 0 for k in (kd, kh, kw)):
        raise ShapeError(f"conv3d kernel extents must be odd, got {(kd, kh, kw)}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias must be ({c_out},), got {bias.shape}")

    spatial = xd.shape[2:]
    out_sp = tuple(_out_extent(n, k, stride, padding) for n, k in zip(spatial, (kd, kh, kw)))
    if any(n < 1 for n in out_sp):
        raise ShapeError(
            f"conv3d output would be empty: input {spatial}, kernel {(kd, kh, kw)}, "
            f"stride {stride}, padding {padding} -> {out_sp}"
        )

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(xd, pad) if padding else xd
    windows = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    windows = windows[:, :, ::stride, ::stride, ::stride]
    do, ho, wo = out_sp
    # rows: one per output voxel (batch-major), columns: C_in*kd*kh*kw
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    col = col.reshape(bsz * do * ho * wo, c_in * kd * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = col @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, do, ho, wo, c_out).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out if batched else out[0])

    padded_shape = xp.shape
    # Gradients that nothing will consume are skipped outright; the input
    # scatter and the weight GEMM are the two dominant costs of a step.
    need_x = x.requires_grad or x.node is not None
    need_w = w.requires_grad or w.node is not None
    need_b = bias is not None and (bias.requires_grad or bias.node is not None)
    col_saved = col if need_w else None

    def backward(g):
        g5 = g if batched else g[None]
        gmat = np.ascontiguousarray(g5.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        dw = (gmat.T @ col_saved).reshape(w.shape) if need_w else None
        db = g5.sum(axis=(0, 2, 3, 4)) if need_b else None
        dx = None
        if need_x:
            dxp = np.zeros(padded_shape, dtype=xd.dtype)
            wofs = w.data.transpose(2, 3, 4, 0, 1)  # (kd, kh, kw, C_out, C_in)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        contrib = gmat @ wofs[i, j, k]
                        contrib = contrib.reshape(bsz, do, ho, wo, c_in).transpose(0, 4, 1, 2, 3)
                        dxp[
                            :,
                            :,
                            i : i + stride * do : stride,
                            j : j + stride * ho : stride,
                            k : k + stride * wo : stride,
                        ] += contrib
            if padding:
                sl = slice(padding, -padding)
                dxp = dxp[:, :, sl, sl, sl]
            dx = np.ascontiguousarray(dxp if batched else dxp[0])
        grads = [dx, dw]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_op(out, inputs, backward, "conv3d")


def upsample_nearest3d(x, factor: int = 2) -> Tensor:
    """Repeat every voxel `factor` times along each spatial axis."""
    x = as_tensor(x)
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"upsample input must be (C,D,H,W) or (B,C,D,H,W), got {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ContractError(f"factor must be a positive integer, got {factor!r}")
    f = int(factor)
    out = x.data.repeat(f, axis=-3).repeat(f, axis=-2).repeat(f, axis=-1)

    def backward(g):
        lead = g.shape[: g.ndim - 3]
        d, h, wd = x.shape[-3:]
        gg = g.reshape(*lead, d, f, h, f, wd, f)
        nd = len(lead)
        dx = gg.sum(axis=(nd + 1, nd + 3, nd + 5)).astype(x.dtype, copy=False)
        return (dx,)

    return make_op(out, (x,), backward, "upsample_nearest3d")
