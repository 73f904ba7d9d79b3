"""3D UNet denoiser: noised feature grid + timestep -> predicted clean grid.

Residual blocks at every resolution, strided-conv downsampling,
trilinear-upsample + conv upsampling, skip connections between matching
resolutions, a sinusoidal timestep embedding added into each residual
block, optional self-attention at the coarsest resolution, and a final
tanh so predictions live in the same [-1, 1] range as the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    Conv3dLayer,
    GroupNorm,
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    matmul,
    reshape,
    silu,
    softmax,
    tanh,
    transpose,
    upsample3d_trilinear,
)
from .voxel_grid import FeatureGrid

__all__ = ["DenoiserConfig", "Denoiser3D", "TimestepEmbedding", "DenoiserError", "denoise"]


class DenoiserError(Exception):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 64            # d_V of the grids being denoised
    base_width: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 2)
    res_blocks: int = 1
    attention: bool = True        # self-attention at the coarsest resolution
    embed_width: int = 128
    groups: int = 8
    total_steps: int = 1000

    def __post_init__(self):
        if self.channels < 1 or self.base_width < 1:
            raise DenoiserError("channels and base_width must be positive")
        if len(self.channel_mults) < 1:
            raise DenoiserError("need at least one resolution level")
        if self.total_steps < 2:
            raise DenoiserError("total_steps must be >= 2")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def min_resolution_divisor(self) -> int:
        return 2 ** (self.levels - 1)


class TimestepEmbedding:
    """Sinusoidal embedding of the normalized timestep t / T."""

    def __init__(self, width: int, total_steps: int):
        if width % 2:
            raise DenoiserError(f"embedding width must be even, got {width}")
        self.width = width
        self.total_steps = total_steps
        half = width // 2
        # frequencies geometric from total_steps down to ~0.1 so adjacent
        # timesteps stay distinguishable after normalization
        self.freqs = float(total_steps) * (10000.0 ** (-np.arange(half) / max(half - 1, 1)))

    def __call__(self, t: int) -> np.ndarray:
        x = float(t) / self.total_steps
        args = x * self.freqs
        return np.concatenate([np.sin(args), np.cos(args)])


class ResBlock3D(Module):
    def __init__(self, c_in: int, c_out: int, emb_width: int, groups: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.norm1 = GroupNorm(c_in, groups, dtype=dtype)
        self.conv1 = Conv3dLayer(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.emb_proj = Linear(emb_width, c_out, rng, dtype)
        self.norm2 = GroupNorm(c_out, groups, dtype=dtype)
        self.conv2 = Conv3dLayer(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.skip = Conv3dLayer(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        e = self.emb_proj(emb)  # (1, c_out)
        h = h + reshape(e, (1, h.shape[1], 1, 1, 1))
        h = self.conv2(silu(self.norm2(h)))
        base = x if self.skip is None else self.skip(x)
        return base + h


class AttentionBlock3D(Module):
    """Single-head self-attention over flattened voxels."""

    def __init__(self, channels: int, groups: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.norm = GroupNorm(channels, groups, dtype=dtype)
        self.q = Linear(channels, channels, rng, dtype, bias=False)
        self.k = Linear(channels, channels, rng, dtype, bias=False)
        self.v = Linear(channels, channels, rng, dtype, bias=False)
        self.proj = Linear(channels, channels, rng, dtype)
        self.scale = 1.0 / np.sqrt(channels)

    def __call__(self, x: Tensor) -> Tensor:
        b, c = x.shape[0], x.shape[1]
        spatial = x.shape[2:]
        n = int(np.prod(spatial))
        tokens = transpose(reshape(self.norm(x), (c, n)), (1, 0))  # (N, C)
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = softmax(matmul(q, transpose(k, (1, 0))) * self.scale, axis=1)
        out = self.proj(matmul(attn, v))
        out = reshape(transpose(out, (1, 0)), (b, c) + spatial)
        return x + out


class Denoiser3D(Module):
    """x0-predicting UNet over (channels, S, S, S) grids."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.embedding = TimestepEmbedding(cfg.embed_width, cfg.total_steps)
        self.time1 = Linear(cfg.embed_width, cfg.embed_width, rng, dtype)
        self.time2 = Linear(cfg.embed_width, cfg.embed_width, rng, dtype)

        widths = [cfg.base_width * m for m in cfg.channel_mults]
        self.stem = Conv3dLayer(cfg.channels, widths[0], 3, rng, padding=1, dtype=dtype)

        self.down_blocks: list[ResBlock3D] = []
        self.down_samplers: list[Conv3dLayer] = []
        skip_chans = [widths[0]]
        ch = widths[0]
        for i, w in enumerate(widths):
            for _ in range(cfg.res_blocks):
                self.down_blocks.append(ResBlock3D(ch, w, cfg.embed_width, cfg.groups,
                                                   rng, dtype))
                ch = w
                skip_chans.append(ch)
            if i < len(widths) - 1:
                self.down_samplers.append(Conv3dLayer(ch, ch, 3, rng, stride=2,
                                                      padding=1, dtype=dtype))
                skip_chans.append(ch)

        self.mid1 = ResBlock3D(ch, ch, cfg.embed_width, cfg.groups, rng, dtype)
        self.mid_attn = (AttentionBlock3D(ch, cfg.groups, rng, dtype)
                         if cfg.attention else None)
        self.mid2 = ResBlock3D(ch, ch, cfg.embed_width, cfg.groups, rng, dtype)

        # one up-resblock per skip entry, mirroring the down path exactly:
        # the down path pushes 1 + res_blocks*levels + (levels-1) skips and
        # each level here pops res_blocks + 1 of them
        self.up_blocks: list[ResBlock3D] = []
        self.up_samplers: list[Conv3dLayer] = []
        ch_up = ch
        for i in reversed(range(len(widths))):
            w = widths[i]
            for _ in range(cfg.res_blocks + 1):
                skip_ch = skip_chans.pop()
                self.up_blocks.append(ResBlock3D(ch_up + skip_ch, w, cfg.embed_width,
                                                 cfg.groups, rng, dtype))
                ch_up = w
            if i > 0:
                self.up_samplers.append(Conv3dLayer(ch_up, ch_up, 3, rng, padding=1,
                                                    dtype=dtype))
        assert not skip_chans, "skip accounting mismatch"

        self.out_norm = GroupNorm(ch_up, cfg.groups, dtype=dtype)
        self.out_conv = Conv3dLayer(ch_up, cfg.channels, 3, rng, padding=1, dtype=dtype)

    def _time_embedding(self, t: int) -> Tensor:
        raw = self.embedding(t).astype(self.dtype)[None]  # (1, E)
        return self.time2(silu(self.time1(as_tensor(raw))))

    def __call__(self, x: Tensor, t: int) -> Tensor:
        """x: (1, channels, S, S, S); returns the same shape in [-1, 1]."""
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.channels:
            raise DenoiserError(
                f"input shape {x.shape} does not match model channels {cfg.channels}")
        s = x.shape[2]
        if x.shape[2:] != (s, s, s) or s % cfg.min_resolution_divisor():
            raise DenoiserError(
                f"grid resolution {x.shape[2:]} must be cubic and divisible by "
                f"{cfg.min_resolution_divisor()}")
        if not 0 <= t < cfg.total_steps:
            raise DenoiserError(f"timestep {t} outside [0, {cfg.total_steps})")

        emb = self._time_embedding(t)
        hs = [self.stem(x)]
        h = hs[0]
        bi = si = 0
        for i in range(cfg.levels):
            for _ in range(cfg.res_blocks):
                h = self.down_blocks[bi](h, emb)
                bi += 1
                hs.append(h)
            if i < cfg.levels - 1:
                h = self.down_samplers[si](h)
                si += 1
                hs.append(h)

        h = self.mid1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, emb)

        ui = pi = 0
        for i in reversed(range(cfg.levels)):
            for _ in range(cfg.res_blocks + 1):
                h = self.up_blocks[ui](concat([h, hs.pop()], axis=1), emb)
                ui += 1
            if i > 0:
                h = self.up_samplers[pi](upsample3d_trilinear(h, 2))
                pi += 1
        assert not hs, "skip stack not consumed"

        return tanh(self.out_conv(silu(self.out_norm(h))))


def denoise(model: Denoiser3D, grid: FeatureGrid, t: int) -> FeatureGrid:
    """Predict the clean grid from a noised grid at timestep t."""
    data = grid.data
    if data.shape[0] != model.cfg.channels:
        raise DenoiserError(
            f"grid channels {data.shape[0]} != model channels {model.cfg.channels}")
    x = reshape(data, (1,) + data.shape)
    out = model(x, t)
    return FeatureGrid(reshape(out, data.shape), extent=grid.extent)
