"""Differentiable emission-absorption rendering of feature grids.

A render walks every pixel ray through the grid's world cube, samples
the grid trilinearly at regular intervals along the clipped segment,
decodes each sample to (density, radiance) with an MLP, and composites
front-to-back with EA weights w_i = T_i - T_{i+1}, T_i = exp(-sum sigma
Delta).  Rays that miss the cube get a zero-length segment, which makes
their weights vanish and leaves the pixel black with full residual
transmittance - no masking special cases anywhere.

The decoder is duck-typed: anything callable as ``decoder(features,
dir_encoded) -> (sigma, rgb)`` works, which is how oracle decoders slot
into the same pipeline in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import (
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    cumsum,
    exp,
    leaky_relu,
    reshape,
    sigmoid,
    softplus,
    transpose,
    tsum,
)
from .geometry import Camera, pixel_rays
from .voxel_grid import FeatureGrid, sample_trilinear

__all__ = [
    "RenderConfig",
    "RenderMLP",
    "RenderOutput",
    "RendererError",
    "positional_encode_direction",
    "decode_point",
    "ea_compose",
    "ray_cube_clip",
    "march_rays",
    "render",
]


class RendererError(Exception):
    pass


@dataclass(frozen=True)
class RenderConfig:
    """Ray-marching parameters; the per-ray step length is derived as
    (exit - entry) / n_samples from the cube clip."""

    n_samples: int = 32
    dir_freqs: int = 4          # L for the sinusoidal direction encoding
    width: Optional[int] = None   # override camera image size (scales intrinsics)
    height: Optional[int] = None
    ray_chunk: int = 16384

    def __post_init__(self):
        if self.n_samples < 2:
            raise RendererError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.dir_freqs < 0:
            raise RendererError("dir_freqs must be >= 0")


@dataclass
class RenderOutput:
    rgb: Tensor                 # (3, H, W) in [0, 1]
    transmittance: np.ndarray   # (H, W) residual T after the last sample


def positional_encode_direction(d: np.ndarray, freqs: int) -> np.ndarray:
    """Concatenate d with sin/cos(2^k * pi * d), k = 0..freqs-1.

    Output width 3 + 6*freqs (27 for the default 4 frequency levels).
    """
    d = np.asarray(d, dtype=np.float64)
    parts = [d]
    for k in range(freqs):
        w = (2.0 ** k) * np.pi
        parts.append(np.sin(w * d))
        parts.append(np.cos(w * d))
    return np.concatenate(parts, axis=-1)


class RenderMLP(Module):
    """Feature decoder: 4 hidden layers with an input skip at the 3rd,
    density head off the trunk (view-independent), radiance head off the
    trunk concatenated with the encoded view direction."""

    LEAKY_SLOPE = 0.01

    def __init__(self, feature_dim: int, rng: np.random.Generator, hidden: int = 256,
                 dir_freqs: int = 4, dtype=np.float32):
        self.feature_dim = int(feature_dim)
        self.hidden = int(hidden)
        self.dir_freqs = int(dir_freqs)
        dir_dim = 3 + 6 * self.dir_freqs
        self.layer1 = Linear(feature_dim, hidden, rng, dtype)
        self.layer2 = Linear(hidden, hidden, rng, dtype)
        self.layer3 = Linear(hidden + feature_dim, hidden, rng, dtype)  # input skip
        self.layer4 = Linear(hidden, hidden, rng, dtype)
        self.density_head = Linear(hidden, 1, rng, dtype)
        self.radiance_head = Linear(hidden + dir_dim, 3, rng, dtype)
        self.dtype = np.dtype(dtype)

    def trunk(self, features: Tensor) -> Tensor:
        h = leaky_relu(self.layer1(features), self.LEAKY_SLOPE)
        h = leaky_relu(self.layer2(h), self.LEAKY_SLOPE)
        h = leaky_relu(self.layer3(concat([h, features], axis=1)), self.LEAKY_SLOPE)
        return leaky_relu(self.layer4(h), self.LEAKY_SLOPE)

    def __call__(self, features: Tensor, dir_encoded) -> tuple[Tensor, Tensor]:
        h = self.trunk(features)
        sigma = softplus(self.density_head(h))
        d = as_tensor(np.asarray(dir_encoded if not isinstance(dir_encoded, Tensor)
                                 else dir_encoded.data, dtype=self.dtype))
        rgb = sigmoid(self.radiance_head(concat([h, d], axis=1)))
        return sigma, rgb


def decode_point(mlp, features: Tensor, dir_encoded) -> tuple[Tensor, Tensor]:
    """Decode per-point features to (density >= 0, rgb in [0,1]^3)."""
    return mlp(features, dir_encoded)


def ea_compose(sigma: Tensor, rgb: Tensor, delta) -> tuple[Tensor, np.ndarray]:
    """Front-to-back EA compositing.

    sigma: (R, S) non-negative densities, rgb: (R, S, 3), delta: step
    length(s) - scalar, (R,), or (R, 1).  Returns the composited colors
    (R, 3) and the residual transmittance T_{S+1} per ray (diagnostic,
    not differentiable).
    """
    sigma = as_tensor(sigma)
    rgb = as_tensor(rgb)
    if sigma.ndim != 2 or rgb.ndim != 3 or rgb.shape[:2] != sigma.shape:
        raise RendererError(
            f"ea_compose: sigma {sigma.shape} and rgb {rgb.shape} are inconsistent")
    d = np.asarray(delta.data if isinstance(delta, Tensor) else delta,
                   dtype=sigma.data.dtype)
    if d.ndim == 1:
        d = d[:, None]
    s = sigma * as_tensor(d, like=sigma)
    cum = cumsum(s, axis=1)
    t_incl = exp(-cum)       # T_{i+1}
    t_excl = exp(s - cum)    # T_i = exp(-(cum - s))
    weights = t_excl - t_incl
    color = tsum(reshape(weights, weights.shape + (1,)) * rgb, axis=1)
    t_final = np.exp(-cum.data[:, -1])
    return color, t_final


def ray_cube_clip(origins: np.ndarray, dirs: np.ndarray, lo: float, hi: float):
    """Entry/exit distances of rays against the axis-aligned cube [lo,hi]^3.

    Rays that miss (or exit behind the origin) get t0 = t1 = 0, i.e. a
    zero-length segment.
    """
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    ta = (lo - origins) / d
    tb = (hi - origins) / d
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    t0 = np.maximum(tmin, 0.0)
    hit = tmax > t0
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, tmax, 0.0)
    return t0, t1


def _scaled_camera(camera: Camera, width: Optional[int], height: Optional[int]) -> Camera:
    w = width or camera.width
    h = height or camera.height
    if (w, h) == (camera.width, camera.height):
        return camera
    sx = w / camera.width
    sy = h / camera.height
    return Camera(extrinsic=camera.extrinsic, fx=camera.fx * sx, fy=camera.fy * sy,
                  cx=camera.cx * sx, cy=camera.cy * sy, width=w, height=h)


def march_rays(grid: FeatureGrid, origins: np.ndarray, dirs: np.ndarray,
               decoder, cfg: RenderConfig) -> tuple[Tensor, np.ndarray]:
    """Sample-decode-composite arbitrary rays; returns colors (R, 3) and
    residual transmittance (R,).  The shared core of all rendering."""
    lo, hi = grid.extent
    t0, t1 = ray_cube_clip(origins, dirs, lo, hi)
    n_rays = origins.shape[0]
    ns = cfg.n_samples
    dtype = grid.data.data.dtype

    colors = []
    t_finals = []
    for start in range(0, n_rays, cfg.ray_chunk):
        sl = slice(start, min(start + cfg.ray_chunk, n_rays))
        o_c, d_c = origins[sl], dirs[sl]
        delta = (t1[sl] - t0[sl]) / ns                      # (r,)
        ts = t0[sl][:, None] + (np.arange(ns) + 0.5) * delta[:, None]
        pts = o_c[:, None, :] + d_c[:, None, :] * ts[..., None]
        feats = sample_trilinear(grid, pts.reshape(-1, 3))  # (r*ns, d_V)
        enc = positional_encode_direction(d_c, cfg.dir_freqs).astype(dtype)
        enc = np.repeat(enc, ns, axis=0)
        sigma, rgb = decoder(feats, enc)
        r = o_c.shape[0]
        sigma = reshape(sigma, (r, ns))
        rgb = reshape(rgb, (r, ns, 3))
        color, t_fin = ea_compose(sigma, rgb, delta.astype(dtype))
        colors.append(color)
        t_finals.append(t_fin)

    color_all = colors[0] if len(colors) == 1 else concat(colors, axis=0)
    return color_all, np.concatenate(t_finals)


def render(grid: FeatureGrid, camera: Camera, decoder, cfg: RenderConfig) -> RenderOutput:
    """Render the grid from a camera; differentiable w.r.t. grid data and
    decoder parameters."""
    cam = _scaled_camera(camera, cfg.width, cfg.height)
    h, w = cam.height, cam.width
    origins, dirs = pixel_rays(cam)
    color_all, t_final = march_rays(grid, origins, dirs, decoder, cfg)
    img = transpose(reshape(color_all, (h, w, 3)), (2, 0, 1))
    return RenderOutput(rgb=img, transmittance=t_final.reshape(h, w))
