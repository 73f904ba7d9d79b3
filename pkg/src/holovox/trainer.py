"""Training loop for the bootstrapped latent diffusion pipeline.

One step: build the auxiliary grid from random source views, noise it at
a random timestep, denoise, render against disjoint target views, and
with probability 0.5 run the two-pass bootstrap — re-noise the (detached)
prediction at a fresh timestep, denoise again, and add the second
photometric term.  Every random draw comes from one explicit generator in
a fixed order, so a (seed, config, dataset) triple pins the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataio import PosedVideo, load_checkpoint, save_checkpoint
from .denoiser import Denoiser3D, DenoiserConfig, denoise
from .engine import Adam, Tape, Tensor, no_grad, tmean
from .geometry import pixel_rays
from .renderer import RenderConfig, RenderMLP, march_rays
from .schedule import NoiseSchedule, denoise_step, diffuse, linear_schedule
from .unprojector import Accumulator, ImageEncoder, build_auxiliary_grid
from .voxel_grid import FeatureGrid

__all__ = [
    "TrainConfig",
    "ModelState",
    "LossReport",
    "TrainerError",
    "build_model_state",
    "photometric_loss",
    "train_step",
    "sample_generation",
    "lr_plateau",
    "evaluate_reconstruction",
    "mean_color_baseline_psnr",
    "psnr",
    "save_state",
    "load_state",
]


class TrainerError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs, components included."""

    # view sampling
    n_source_views: int = 10
    n_target_views: int = 3
    # optimization
    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bootstrap_prob: float = 0.5
    max_steps: int = 2000
    # plateau-triggered learning-rate decay
    decay_factor: float = 0.1
    plateau_patience: int = 200
    plateau_threshold: float = 0.01
    plateau_window: int = 50
    max_lr_decays: int = 3
    # grid
    grid_channels: int = 64
    grid_resolution: int = 16
    # noise schedule
    schedule_steps: int = 1000
    beta_first: float = 1e-4
    beta_last: float = 0.02
    # components
    encoder_channels: int = 32
    accumulator_hidden: int = 64
    render: RenderConfig = field(default_factory=RenderConfig)
    render_hidden: int = 256
    denoiser_base_width: int = 64
    denoiser_channel_mults: tuple[int, ...] = (1, 2, 2)
    denoiser_res_blocks: int = 1
    denoiser_attention: bool = True
    denoiser_embed_width: int = 128
    denoiser_groups: int = 8

    def __post_init__(self):
        if self.n_source_views < 1 or self.n_target_views < 1:
            raise TrainerError("need at least one source and one target view")
        if not 0.0 <= self.bootstrap_prob <= 1.0:
            raise TrainerError("bootstrap_prob must lie in [0, 1]")

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            channels=self.grid_channels,
            base_width=self.denoiser_base_width,
            channel_mults=tuple(self.denoiser_channel_mults),
            res_blocks=self.denoiser_res_blocks,
            attention=self.denoiser_attention,
            embed_width=self.denoiser_embed_width,
            groups=self.denoiser_groups,
            total_steps=self.schedule_steps,
        )


@dataclass
class ModelState:
    """All trainable parameters plus optimizer moments and step counter."""

    encoder: ImageEncoder
    accumulator: Accumulator
    denoiser: Denoiser3D
    render_mlp: RenderMLP
    optimizer: Adam
    schedule: NoiseSchedule
    grid_resolution: int = 16
    step: int = 0

    PARAM_GROUPS = ("encoder", "accumulator", "denoiser", "render_mlp")

    def named_parameters(self):
        for group in self.PARAM_GROUPS:
            module = getattr(self, group)
            yield from module.named_parameters(prefix=group + ".")

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def gradient_nonzero_by_group(self) -> dict[str, bool]:
        out = {}
        for group in self.PARAM_GROUPS:
            module = getattr(self, group)
            out[group] = any(p.grad is not None and np.any(p.grad != 0)
                             for p in module.parameters())
        return out

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise TrainerError(f"parameter {name!r} contains non-finite values")


@dataclass
class LossReport:
    photometric: float
    t: int
    bootstrap: Optional[float] = None
    t_prime: Optional[int] = None

    def __post_init__(self):
        if self.photometric < 0 or (self.bootstrap is not None and self.bootstrap < 0):
            raise TrainerError("losses must be non-negative")

    @property
    def total(self) -> float:
        return self.photometric + (self.bootstrap or 0.0)


def build_model_state(cfg: TrainConfig, rng: np.random.Generator,
                      dtype=np.float32) -> ModelState:
    encoder = ImageEncoder(rng, feat_dim=cfg.encoder_channels, dtype=dtype)
    accumulator = Accumulator(rng, feat_dim=cfg.encoder_channels,
                              out_dim=cfg.grid_channels,
                              hidden=cfg.accumulator_hidden, dtype=dtype)
    den = Denoiser3D(cfg.denoiser_config(), rng, dtype=dtype)
    mlp = RenderMLP(feature_dim=cfg.grid_channels, rng=rng, hidden=cfg.render_hidden,
                    dir_freqs=cfg.render.dir_freqs, dtype=dtype)
    state = ModelState(
        encoder=encoder, accumulator=accumulator, denoiser=den, render_mlp=mlp,
        optimizer=None, schedule=linear_schedule(cfg.schedule_steps, cfg.beta_first,
                                                 cfg.beta_last),
        grid_resolution=cfg.grid_resolution)
    state.optimizer = Adam(list(state.named_parameters()), lr=cfg.learning_rate,
                           beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return state


def photometric_loss(grid: FeatureGrid, targets, mlp, cfg: RenderConfig) -> Tensor:
    """Mean squared error between renders and target images, averaged over
    targets and pixels.  All target views march in one fused pass."""
    if not targets:
        raise TrainerError("photometric_loss: no target views")
    shapes = {img.shape for img, _ in targets}
    sizes = {(cam.width, cam.height) for _, cam in targets}
    if len(shapes) != 1 or len(sizes) != 1:
        raise TrainerError(f"photometric_loss: mixed target resolutions {shapes} / {sizes}")
    (c, h, w) = next(iter(shapes))
    (cw, ch) = next(iter(sizes))
    if c != 3 or (w, h) != (cw, ch):
        raise TrainerError(
            f"photometric_loss: image shape {(c, h, w)} does not match camera {cw}x{ch}")

    origins = []
    dirs = []
    rows = []
    dtype = grid.data.data.dtype
    for img, cam in targets:
        o, d = pixel_rays(cam)
        origins.append(o)
        dirs.append(d)
        rows.append(np.asarray(img, dtype=dtype).transpose(1, 2, 0).reshape(-1, 3))
    colors, _ = march_rays(grid, np.concatenate(origins), np.concatenate(dirs), mlp, cfg)
    target_rows = Tensor(np.concatenate(rows))
    diff = colors - target_rows
    return tmean(diff * diff)


def _split_views(n_frames: int, cfg: TrainConfig, rng: np.random.Generator):
    need = cfg.n_source_views + cfg.n_target_views
    if n_frames < need:
        raise TrainerError(
            f"video has {n_frames} frames; need n_source + n_target = {need}")
    perm = rng.permutation(n_frames)
    sources = np.sort(perm[: cfg.n_source_views])
    targets = np.sort(perm[cfg.n_source_views: need])
    return sources, targets


def train_step(state: ModelState, video: PosedVideo, rng: np.random.Generator,
               cfg: TrainConfig) -> LossReport:
    """One optimization step on one video; returns the loss report.

    Draw order (fixed): view permutation, t, noise, bootstrap coin,
    then (t', noise') only when the bootstrap branch runs.
    """
    sched = state.schedule
    sources, targets = _split_views(video.n_frames, cfg, rng)
    source_frames = [video.frames[i] for i in sources]
    target_frames = [video.frames[i] for i in targets]
    dtype = state.encoder.dtype

    state.zero_grad()
    with Tape() as tape:
        aux = build_auxiliary_grid(source_frames, state.encoder, state.accumulator,
                                   resolution=cfg.grid_resolution)
        t = int(rng.integers(sched.steps))
        eps = Tensor(rng.standard_normal(aux.data.shape).astype(dtype))
        noised = FeatureGrid(diffuse(aux.data, t, eps, sched), extent=aux.extent)
        pred = denoise(state.denoiser, noised, t)
        loss_photo = photometric_loss(pred, target_frames, state.render_mlp, cfg.render)

        total = loss_photo
        loss_boot = None
        t_prime = None
        run_bootstrap = bool(rng.random() < cfg.bootstrap_prob)
        if run_bootstrap:
            t_prime = int(rng.integers(sched.steps))
            eps2 = Tensor(rng.standard_normal(aux.data.shape).astype(dtype))
            # the first prediction acts as a clean data sample here, so it
            # is detached before re-noising; gradients still flow through
            # the second denoise and the render
            clean = FeatureGrid(pred.data.detach(), extent=pred.extent)
            renoised = FeatureGrid(diffuse(clean.data, t_prime, eps2, sched),
                                   extent=clean.extent)
            pred2 = denoise(state.denoiser, renoised, t_prime)
            loss_boot = photometric_loss(pred2, target_frames, state.render_mlp,
                                         cfg.render)
            total = total + loss_boot

        photo_val = float(loss_photo.item())
        boot_val = float(loss_boot.item()) if loss_boot is not None else None
        if not np.isfinite(photo_val) or (boot_val is not None and not np.isfinite(boot_val)):
            raise TrainerError(
                f"non-finite loss at step {state.step}: photometric={photo_val} "
                f"bootstrap={boot_val} (t={t}, t'={t_prime})")
        tape.backward(total)

    state.optimizer.step()
    state.step += 1
    return LossReport(photometric=photo_val, t=t, bootstrap=boot_val, t_prime=t_prime)


def sample_generation(state: ModelState, n_grids: int, rng: np.random.Generator,
                      sched: Optional[NoiseSchedule] = None) -> list[FeatureGrid]:
    """Draw grids from the model: start at pure noise, iteratively predict
    the clean grid and re-noise one level down; the final output is the
    last clean prediction, clamped to [-1, 1]."""
    sched = sched or state.schedule
    cfg = state.denoiser.cfg
    shape = (cfg.channels,) + (state.grid_resolution,) * 3
    out = []
    dtype = state.encoder.dtype
    with no_grad():
        for _ in range(n_grids):
            x = FeatureGrid(Tensor(rng.standard_normal(shape).astype(dtype)))
            pred = None
            for t in range(sched.steps - 1, 0, -1):
                pred = denoise(state.denoiser, x, t)
                noise = Tensor(rng.standard_normal(shape).astype(dtype))
                x = FeatureGrid(denoise_step(x.data, t, pred.data, noise, sched),
                                extent=x.extent)
            final = np.clip(pred.data.data, -1.0, 1.0)
            out.append(FeatureGrid(Tensor(final), extent=x.extent))
    return out


def lr_plateau(history, base_lr: float, *, factor: float = 0.1, patience: int = 200,
               threshold: float = 0.01, window: int = 50, max_decays: int = 3) -> float:
    """Learning rate after applying the plateau rule to a loss history.

    The windowed mean must improve on its best value by ``threshold``
    (relative) within ``patience`` steps, else the rate decays by
    ``factor``; at most ``max_decays`` times.  Pure replay, so the same
    history always yields the same rate.
    """
    losses = np.asarray(history, dtype=np.float64)
    if losses.size < max(window, 2):
        return base_lr
    means = np.convolve(losses, np.ones(window) / window, mode="valid")
    best = means[0]
    anchor = 0
    decays = 0
    for i in range(1, means.size):
        if means[i] < best * (1.0 - threshold):
            best = means[i]
            anchor = i
        elif i - anchor >= patience and decays < max_decays:
            decays += 1
            best = means[i]
            anchor = i
    return base_lr * (factor ** decays)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise in dB for images in [0, 1]."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64)
                         - np.asarray(target, dtype=np.float64)) ** 2))
    return 10.0 * np.log10(1.0 / max(mse, 1e-12))


def _eval_split(video: PosedVideo, n_source: int):
    n = video.n_frames
    n_source = min(n_source, n - 1)
    src_idx = np.unique(np.linspace(0, n - 1, n_source).round().astype(int))
    tgt_idx = np.array([i for i in range(n) if i not in set(src_idx.tolist())])
    return src_idx, tgt_idx


def reconstruct_grid(state: ModelState, frames, resolution: int) -> FeatureGrid:
    """Deterministic reconstruction: auxiliary grid scaled to the t=0
    signal level, then one denoiser pass at t=0."""
    sched = state.schedule
    with no_grad():
        aux = build_auxiliary_grid(frames, state.encoder, state.accumulator,
                                   resolution=resolution)
        scale = float(np.sqrt(sched.alpha_bar[0]))
        x0 = FeatureGrid(aux.data * scale, extent=aux.extent)
        return denoise(state.denoiser, x0, 0)


def mean_color_baseline_psnr(source_frames, target_frames) -> float:
    """PSNR of predicting every target pixel as the sources' mean color."""
    mean_color = np.mean([img.reshape(3, -1).mean(axis=1) for img, _ in source_frames],
                         axis=0)
    vals = [psnr(np.broadcast_to(mean_color[:, None, None], img.shape), img)
            for img, _ in target_frames]
    return float(np.mean(vals))


def evaluate_reconstruction(state: ModelState, videos, cfg: TrainConfig) -> dict:
    """Held-out-view PSNR per scene vs the mean-color baseline."""
    from .renderer import render

    per_scene = {}
    for video in videos:
        src_idx, tgt_idx = _eval_split(video, cfg.n_source_views)
        sources = [video.frames[i] for i in src_idx]
        targets = [video.frames[i] for i in tgt_idx]
        grid = reconstruct_grid(state, sources, cfg.grid_resolution)
        with no_grad():
            vals = []
            for img, cam in targets:
                out = render(grid, cam, state.render_mlp, cfg.render)
                vals.append(psnr(out.rgb.data, img))
        per_scene[video.scene_id] = {
            "psnr": float(np.mean(vals)),
            "baseline_psnr": mean_color_baseline_psnr(sources, targets),
            "n_targets": len(targets),
        }
    mean_psnr = float(np.mean([v["psnr"] for v in per_scene.values()]))
    mean_base = float(np.mean([v["baseline_psnr"] for v in per_scene.values()]))
    return {"scenes": per_scene, "mean_psnr": mean_psnr, "mean_baseline_psnr": mean_base}


def save_state(path, state: ModelState, cfg: TrainConfig, rng: np.random.Generator,
               extra_meta: dict | None = None) -> None:
    arrays = state.state_arrays()
    arrays["step"] = np.array([state.step], dtype=np.int64)
    meta = {
        "kind": "model_state",
        "config": _config_to_meta(cfg),
        "rng_state": rng.bit_generator.state,
        "adam_t": state.optimizer.t,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def load_state(path, cfg: TrainConfig, dtype=np.float32) -> tuple[ModelState, np.random.Generator]:
    arrays, meta = load_checkpoint(path)
    # construction order does not matter; every parameter is overwritten
    state = build_model_state(cfg, np.random.default_rng(0), dtype=dtype)
    for group in ModelState.PARAM_GROUPS:
        getattr(state, group).load_state_arrays(arrays, prefix=group + ".")
    state.optimizer.load_state_arrays(arrays)
    state.optimizer.t = int(meta.get("adam_t", 0))
    state.optimizer.lr = cfg.learning_rate
    state.step = int(arrays["step"][0]) if "step" in arrays else 0
    rng = np.random.default_rng(0)
    if "rng_state" in meta:
        rng.bit_generator.state = meta["rng_state"]
    return state, rng


def _config_to_meta(cfg: TrainConfig) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    d["render"] = asdict(cfg.render)
    return d
