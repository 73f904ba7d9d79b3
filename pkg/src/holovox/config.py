"""Run configuration: a documented key=value text format.

Lines are ``key = value``; ``#`` starts a comment.  Unknown keys are
rejected; missing keys fall back to their defaults with a printed
notice.  ``holovox train --config`` consumes these files, and every
TrainConfig/RenderConfig/grid/schedule field is reachable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "RunConfig", "parse_config_file", "load_run_config",
           "CONFIG_KEYS", "config_template"]


class ConfigError(Exception):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


_REQUIRED = object()

# key -> (parser, default, description)
CONFIG_KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "dataset": (str, _REQUIRED, "dataset directory (holds scenes/)"),
    "out_dir": (str, _REQUIRED, "run directory for logs/checkpoints/renders"),
    "seed": (int, 0, "master seed for the whole run"),
    "deterministic": (_parse_bool, True, "fixed seeds and summation orders"),
    "max_steps": (int, 2000, "number of training steps"),
    "log_every": (int, 10, "metrics-log cadence in steps"),
    "checkpoint_every": (int, 500, "checkpoint cadence in steps"),
    "render_every": (int, 500, "held-out preview render cadence (0 = off)"),
    # view sampling
    "n_source_views": (int, 10, "source views lifted into the auxiliary grid"),
    "n_target_views": (int, 3, "held-out views the photometric loss renders"),
    # optimization
    "learning_rate": (float, 5e-5, "Adam initial learning rate"),
    "bootstrap_prob": (float, 0.5, "probability of the two-pass bootstrap branch"),
    "decay_factor": (float, 0.1, "learning-rate decay factor on plateau"),
    "plateau_patience": (int, 200, "steps without improvement before decay"),
    "plateau_threshold": (float, 0.01, "relative improvement that resets patience"),
    "plateau_window": (int, 50, "moving-average window for the plateau rule"),
    "max_lr_decays": (int, 3, "maximum number of plateau decays"),
    # grid
    "grid_channels": (int, 64, "feature channels d_V of the voxel grid"),
    "grid_resolution": (int, 16, "voxel grid resolution S"),
    # noise schedule
    "schedule_steps": (int, 1000, "diffusion timesteps T"),
    "beta_first": (float, 1e-4, "first beta of the linear schedule"),
    "beta_last": (float, 0.02, "last beta of the linear schedule"),
    # components
    "encoder_channels": (int, 32, "image-encoder feature channels"),
    "accumulator_hidden": (int, 64, "accumulator MLP hidden width"),
    "render_samples": (int, 32, "samples per ray"),
    "render_hidden": (int, 256, "render MLP hidden width"),
    "render_dir_freqs": (int, 4, "sinusoidal frequency levels for directions"),
    "render_ray_chunk": (int, 16384, "rays per render chunk"),
    "denoiser_base_width": (int, 64, "UNet base channel width"),
    "denoiser_channel_mults": (_parse_int_tuple, (1, 2, 2), "per-level width multipliers"),
    "denoiser_res_blocks": (int, 1, "residual blocks per level"),
    "denoiser_attention": (_parse_bool, True, "self-attention at the coarsest level"),
    "denoiser_embed_width": (int, 128, "timestep embedding width"),
    "denoiser_groups": (int, 8, "group-norm group count"),
}


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getattr__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def train_config(self):
        from .renderer import RenderConfig
        from .trainer import TrainConfig

        v = self.values
        return TrainConfig(
            n_source_views=v["n_source_views"],
            n_target_views=v["n_target_views"],
            learning_rate=v["learning_rate"],
            bootstrap_prob=v["bootstrap_prob"],
            max_steps=v["max_steps"],
            decay_factor=v["decay_factor"],
            plateau_patience=v["plateau_patience"],
            plateau_threshold=v["plateau_threshold"],
            plateau_window=v["plateau_window"],
            max_lr_decays=v["max_lr_decays"],
            grid_channels=v["grid_channels"],
            grid_resolution=v["grid_resolution"],
            schedule_steps=v["schedule_steps"],
            beta_first=v["beta_first"],
            beta_last=v["beta_last"],
            encoder_channels=v["encoder_channels"],
            accumulator_hidden=v["accumulator_hidden"],
            render=RenderConfig(n_samples=v["render_samples"],
                                dir_freqs=v["render_dir_freqs"],
                                ray_chunk=v["render_ray_chunk"]),
            render_hidden=v["render_hidden"],
            denoiser_base_width=v["denoiser_base_width"],
            denoiser_channel_mults=tuple(v["denoiser_channel_mults"]),
            denoiser_res_blocks=v["denoiser_res_blocks"],
            denoiser_attention=v["denoiser_attention"],
            denoiser_embed_width=v["denoiser_embed_width"],
            denoiser_groups=v["denoiser_groups"],
        )


def parse_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def load_run_config(path, overrides: dict[str, str] | None = None,
                    notice=print) -> RunConfig:
    raw = parse_config_file(path)
    if overrides:
        raw.update(overrides)
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for key, (parser, default, _help) in CONFIG_KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"config key {key!r} is required")
        else:
            values[key] = default
            notice(f"config: using default {key} = {default}")
    return RunConfig(values=values)


def config_template() -> str:
    lines = ["# holovox run configuration (key = value)"]
    for key, (_parser, default, help_text) in CONFIG_KEYS.items():
        shown = "" if default is _REQUIRED else repr(default)
        if isinstance(default, tuple):
            shown = ",".join(str(x) for x in default)
        elif isinstance(default, bool):
            shown = "true" if default else "false"
        lines.append(f"# {help_text}")
        lines.append(f"{key} = {shown}" if default is not _REQUIRED else f"{key} =")
        lines.append("")
    return "\n".join(lines)
