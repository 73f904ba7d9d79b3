"""Strided 2-D/3-D convolution and 3-D upsampling primitives.

Convolutions are cross-correlations (deep-learning convention) computed
by im2col + BLAS matmul.  Backward runs through BLAS as well: the weight
gradient is a single reshaped matmul against the saved im2col matrix,
and the input gradient scatters one BLAS product back with one strided
accumulation per kernel offset (col2im without an explicit scatter).
"""

from __future__ import annotations

from itertools import product as _iterproduct
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _emit, as_tensor, _require_same_dtype

__all__ = [
    "conv2d",
    "conv3d",
    "upsample3d_nearest",
    "upsample3d_trilinear",
]


def _conv_forward_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Cross-correlate x (B,C,*sp) with w (O,C,*k); returns (out, colsT).

    ``colsT`` is the transposed im2col matrix (B, C*K, P) — spatial runs
    stay contiguous, which keeps both the copy and every BLAS call on
    fast paths.  The weight gradient reuses it.
    """
    nd = x.ndim - 2
    k = w.shape[2:]
    if padding:
        pad = ((0, 0), (0, 0)) + ((padding, padding),) * nd
        x = np.pad(x, pad)
    win = sliding_window_view(x, k, axis=tuple(range(2, 2 + nd)))
    if stride != 1:
        sl = (slice(None), slice(None)) + (slice(None, None, stride),) * nd
        win = win[sl]
    out_sp = win.shape[2:2 + nd]
    b = x.shape[0]
    # (B, C, *out_sp, *k) -> (B, C, *k, *out_sp) -> (B, C*K, P)
    perm = (0, 1) + tuple(range(2 + nd, 2 + 2 * nd)) + tuple(range(2, 2 + nd))
    colst = np.ascontiguousarray(win.transpose(perm)).reshape(b, -1, int(np.prod(out_sp)))
    w_flat = w.reshape(w.shape[0], -1)
    out = np.matmul(w_flat[None], colst)  # (B, O, P)
    return out.reshape(b, w.shape[0], *out_sp), colst


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_sp: tuple[int, ...],
                     stride: int, padding: int) -> np.ndarray:
    """dL/dx for a conv with kernel w given dL/dout g (B,O,*out_sp).

    One BLAS product turns g into per-offset contributions; each kernel
    offset then accumulates into a strided slice of the padded input.
    """
    nd = g.ndim - 2
    b = g.shape[0]
    o, c = w.shape[0], w.shape[1]
    k = w.shape[2:]
    out_sp = g.shape[2:]
    p_total = int(np.prod(out_sp))
    w_flat = w.reshape(o, -1)
    g2 = np.ascontiguousarray(g).reshape(b, o, p_total)
    gcolst = np.matmul(w_flat.T[None], g2)           # (B, C*K, P)
    gcolst = gcolst.reshape((b, c) + k + (p_total,))

    padded_sp = tuple(s + 2 * padding for s in in_sp)
    gx_pad = np.zeros((b, c) + padded_sp, dtype=g.dtype)
    for offset in _iterproduct(*(range(kk) for kk in k)):
        sl = tuple(slice(u, u + (osp - 1) * stride + 1, stride)
                   for u, osp in zip(offset, out_sp))
        block = gcolst[(slice(None), slice(None)) + offset].reshape((b, c) + out_sp)
        gx_pad[(slice(None), slice(None)) + sl] += block
    if padding:
        inner = tuple(slice(padding, padding + s) for s in in_sp)
        return gx_pad[(slice(None), slice(None)) + inner]
    return gx_pad


def _convnd(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int,
            nd: int, op: str) -> Tensor:
    x = as_tensor(x)
    w = as_tensor(w)
    _require_same_dtype(op, x, w)
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(
            f"{op}: expected input (B,C,{'x'.join('S' * nd)}) and kernel rank {nd + 2}, "
            f"got shapes {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: input channels {x.shape[1]} != kernel channels {w.shape[1]} "
                         f"(shapes {x.shape}, {w.shape})")
    if stride not in (1, 2):
        raise ShapeError(f"{op}: only strides 1 and 2 are supported, got {stride}")
    for dim, kk in zip(x.shape[2:], w.shape[2:]):
        if dim + 2 * padding < kk:
            raise ShapeError(f"{op}: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    if b is not None:
        b = as_tensor(b)
        _require_same_dtype(op, x, b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"{op}: bias shape {b.shape} != ({w.shape[0]},)")

    xd, wd = x.data, w.data
    out, colst = _conv_forward_raw(xd, wd, stride, padding)
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nd)
    in_sp = xd.shape[2:]

    def bwd(g):
        gx = gw = gb = None
        g = np.ascontiguousarray(g)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        if w.requires_grad:
            g2 = g.reshape(g.shape[0], g.shape[1], -1)       # (B, O, P)
            # sum over batch of (O, P) @ (P, C*K)
            gw = np.matmul(g2, colst.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if x.requires_grad:
            gx = _conv_input_grad(g, wd, in_sp, stride, padding)
        grads = (gx, gw) if b is None else (gx, gw, gb)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(op, out, inputs, bwd)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C, H, W), w: (O, C, kh, kw) -> (B, O, H', W')."""
    return _convnd(x, w, b, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C, D, H, W), w: (O, C, kd, kh, kw) -> (B, O, D', H', W')."""
    return _convnd(x, w, b, stride, padding, 3, "conv3d")


def upsample3d_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of (B, C, D, H, W) by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"upsample3d_nearest: expected (B,C,D,H,W), got {x.shape}")
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    b, c, d, h, w = x.shape

    def bwd(g):
        return (g.reshape(b, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _emit("upsample3d_nearest", out, (x,), bwd)


def _linear_upsample_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_out, n_in) interpolation matrix for center-aligned linear upsampling."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    t = src - i0
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    m[np.arange(n_out), i0] += 1.0 - t
    m[np.arange(n_out), i0 + 1] += t
    return m


def _apply_axis_matrix(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    """Contract axis ``axis`` of ``a`` with the columns of ``m`` via BLAS."""
    moved = np.moveaxis(a, axis, -1)
    out = moved @ m.T
    return np.moveaxis(out, -1, axis)


def upsample3d_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear upsampling of (B, C, D, H, W); separable per-axis matrices.

    Implemented as three exact matrix contractions, so the backward pass
    is the transposed contraction — an adjoint by construction.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"upsample3d_trilinear: expected (B,C,D,H,W), got {x.shape}")
    f = int(factor)
    mats = [_linear_upsample_matrix(n, f, x.data.dtype) for n in x.shape[2:]]

    def fwd(a):
        for axis, m in enumerate(mats):
            a = _apply_axis_matrix(a, m, axis + 2)
        return np.ascontiguousarray(a)

    def bwd(g):
        for axis, m in enumerate(mats):
            g = _apply_axis_matrix(g, m.T, axis + 2)
        return (np.ascontiguousarray(g),)

    return _emit("upsample3d_trilinear", fwd(x.data), (x,), bwd)
