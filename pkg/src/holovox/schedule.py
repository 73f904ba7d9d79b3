"""DDPM noise schedule, forward diffusion and the reverse sampling step.

The denoiser predicts the clean signal (x0-formulation), so the reverse
step re-scales the prediction with the previous step's cumulative signal
level and adds fresh noise at the matching level.  All randomness comes
in through explicit noise arguments; nothing here owns an RNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, as_tensor, clip

__all__ = ["NoiseSchedule", "ScheduleError", "linear_schedule", "diffuse",
           "denoise_step", "DEFAULT_STEPS", "DEFAULT_BETA_FIRST", "DEFAULT_BETA_LAST"]

DEFAULT_STEPS = 1000
DEFAULT_BETA_FIRST = 1e-4
DEFAULT_BETA_LAST = 0.02


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha-bar tables, 0-based t in [0, T)."""

    beta: np.ndarray       # (T,) in (0, 1), strictly increasing
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # running products of alpha

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ScheduleError("schedule needs at least two steps")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ScheduleError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) <= 0.0):
            raise ScheduleError("beta must be strictly increasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=np.float64))

    @property
    def steps(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.steps})")
        return t


def linear_schedule(steps: int = DEFAULT_STEPS, beta_first: float = DEFAULT_BETA_FIRST,
                    beta_last: float = DEFAULT_BETA_LAST) -> NoiseSchedule:
    """Betas linearly interpolated between the endpoints, inclusive."""
    if steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {steps}")
    if not (0.0 < beta_first < beta_last < 1.0):
        raise ScheduleError(
            f"need 0 < beta_first < beta_last < 1, got ({beta_first}, {beta_last})")
    beta = np.linspace(beta_first, beta_last, steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _coeffs(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    ab = sched.alpha_bar[t]
    return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def diffuse(x0: Tensor, t: int, noise: Tensor, sched: NoiseSchedule) -> Tensor:
    """Draw x_t directly: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    t = sched.check_t(t)
    x0 = as_tensor(x0)
    noise = as_tensor(noise, like=x0)
    if noise.shape != x0.shape:
        raise ScheduleError(f"noise shape {noise.shape} != signal shape {x0.shape}")
    s, n = _coeffs(sched, t)
    return x0 * s + noise * n


def denoise_step(x_t: Tensor, t: int, x0_hat: Tensor, noise: Tensor,
                 sched: NoiseSchedule) -> Tensor:
    """One reverse step: x_{t-1} from the clean-signal prediction at step t.

    The prediction is clamped to [-1, 1] on every step (the data range is
    tanh-bounded, so in-distribution this is a no-op), then re-noised at
    level t-1: sqrt(abar_{t-1}) * x0_hat + sqrt(1 - abar_{t-1}) * noise.
    """
    t = sched.check_t(t)
    if t < 1:
        raise ScheduleError("denoise_step needs t >= 1; there is no step below t=0")
    x_t = as_tensor(x_t)
    x0_hat = as_tensor(x0_hat, like=x_t)
    noise = as_tensor(noise, like=x_t)
    if x0_hat.shape != x_t.shape or noise.shape != x_t.shape:
        raise ScheduleError(
            f"shape mismatch: x_t {x_t.shape}, x0_hat {x0_hat.shape}, noise {noise.shape}")
    s, n = _coeffs(sched, t - 1)
    return clip(x0_hat, -1.0, 1.0) * s + noise * n
