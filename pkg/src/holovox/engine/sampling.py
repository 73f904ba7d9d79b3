"""Continuous bilinear/trilinear sampling with clamp-to-edge behaviour.

Coordinates are in texel/voxel-center units: position ``i`` is the
center of cell ``i``, so valid interpolation covers ``[0, n-1]`` per
axis and anything outside is clamped to the edge value.  Gradients flow
to the sampled map/volume (via a sparse scatter matrix, one matmul) and,
when the coordinates are a differentiable tensor, to the coordinates.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, _emit, as_tensor

__all__ = ["sample_bilinear", "sample_trilinear"]


def _corner_setup(coords: np.ndarray, dims: tuple[int, ...]):
    """Clamped base indices and fractional offsets per axis."""
    i0s, ts, clamped = [], [], []
    for a, n in enumerate(dims):
        u = coords[:, a]
        uc = np.clip(u, 0.0, n - 1.0)
        clamped.append((u < 0.0) | (u > n - 1.0))
        i0 = np.floor(uc).astype(np.int64)
        np.minimum(i0, max(n - 2, 0), out=i0)
        i0s.append(i0)
        ts.append(uc - i0)
    return i0s, ts, clamped


def _nlinear_sample(vol: Tensor, coords, op: str) -> Tensor:
    """Shared n-linear sampler; vol (C, *dims), coords (N, nd) -> (N, C)."""
    vol = as_tensor(vol)
    coords_t = coords if isinstance(coords, Tensor) else None
    cd = np.asarray(coords_t.data if coords_t is not None else coords, dtype=np.float64)
    nd = vol.ndim - 1
    if cd.ndim != 2 or cd.shape[1] != nd:
        raise ShapeError(f"{op}: coords shape {cd.shape} does not match volume rank {vol.shape}")
    dims = vol.shape[1:]
    c = vol.shape[0]
    n = cd.shape[0]
    dtype = vol.data.dtype

    i0s, ts, clamped = _corner_setup(cd, dims)
    strides = np.cumprod((1,) + dims[::-1][:-1])[::-1]  # row-major flat strides

    n_corners = 1 << nd
    idx = np.empty((n, n_corners), dtype=np.int64)
    wts = np.empty((n, n_corners), dtype=dtype)
    for corner in range(n_corners):
        flat = np.zeros(n, dtype=np.int64)
        w = np.ones(n, dtype=np.float64)
        for a in range(nd):
            hi = (corner >> (nd - 1 - a)) & 1
            ia = i0s[a] + hi if dims[a] > 1 else i0s[a]
            flat += ia * strides[a]
            w *= ts[a] if hi else (1.0 - ts[a])
        idx[:, corner] = flat
        wts[:, corner] = w.astype(dtype)

    vol_t = np.ascontiguousarray(vol.data.reshape(c, -1).T)  # (prod(dims), C)
    out = np.zeros((n, c), dtype=dtype)
    for corner in range(n_corners):
        out += vol_t[idx[:, corner]] * wts[:, corner][:, None]

    vol_shape = vol.shape

    def bwd(g):
        g_vol = g_coords = None
        if vol.requires_grad:
            m = sp.coo_matrix(
                (wts.ravel(),
                 (idx.ravel(), np.repeat(np.arange(n), n_corners))),
                shape=(vol_t.shape[0], n),
            ).tocsr()
            g_vol = np.asarray(m @ g.astype(dtype), dtype=dtype).T.reshape(vol_shape)
            g_vol = np.ascontiguousarray(g_vol)
        if coords_t is not None and coords_t.requires_grad:
            g_coords = np.zeros((n, nd), dtype=coords_t.data.dtype)
            gv = (g.astype(np.float64) * 1.0)
            for a in range(nd):
                if dims[a] == 1:
                    continue
                acc = np.zeros(n, dtype=np.float64)
                for corner in range(n_corners):
                    hi = (corner >> (nd - 1 - a)) & 1
                    dw = np.ones(n, dtype=np.float64)
                    for aa in range(nd):
                        bit = (corner >> (nd - 1 - aa)) & 1
                        if aa == a:
                            dw *= 1.0 if bit else -1.0
                        else:
                            dw *= ts[aa] if bit else (1.0 - ts[aa])
                    corner_vals = vol_t[idx[:, corner]].astype(np.float64)
                    acc += dw * np.einsum("nc,nc->n", gv, corner_vals)
                acc[clamped[a]] = 0.0
                g_coords[:, a] = acc.astype(coords_t.data.dtype)
        if coords_t is not None:
            return g_vol, g_coords
        return (g_vol,)

    inputs = (vol, coords_t) if coords_t is not None else (vol,)
    return _emit(op, out, inputs, bwd)


def sample_bilinear(img: Tensor, coords) -> Tensor:
    """Sample img (C, H, W) at coords (N, 2) ordered (row, col) -> (N, C)."""
    img = as_tensor(img)
    if img.ndim != 3:
        raise ShapeError(f"sample_bilinear: expected (C,H,W) image, got {img.shape}")
    return _nlinear_sample(img, coords, "sample_bilinear")


def sample_trilinear(vol: Tensor, coords) -> Tensor:
    """Sample vol (C, D, H, W) at coords (N, 3) ordered (d, h, w) -> (N, C)."""
    vol = as_tensor(vol)
    if vol.ndim != 4:
        raise ShapeError(f"sample_trilinear: expected (C,D,H,W) volume, got {vol.shape}")
    return _nlinear_sample(vol, coords, "sample_trilinear")
