"""Noise schedule and diffusion/sampling step arithmetic."""

import numpy as np
import pytest

from holovox.engine import Tensor
from holovox.schedule import (
    ScheduleError,
    denoise_step,
    diffuse,
    linear_schedule,
)


def test_default_schedule_endpoints_exact():
    sched = linear_schedule(1000, 0.0001, 0.02)
    assert sched.beta[0] == 0.0001
    assert sched.beta[999] == 0.02
    assert sched.steps == 1000


def test_linear_interpolation_midpoint():
    sched = linear_schedule(1000, 0.0001, 0.02)
    expected = 0.0001 + (0.02 - 0.0001) * 500 / 999
    assert sched.beta[500] == pytest.approx(expected, rel=1e-12)
    assert sched.beta[500] == pytest.approx(0.010060, abs=5e-7)


def test_two_step_alpha_bar():
    sched = linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(sched.alpha, [0.9, 0.8])
    np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.72])


def test_schedule_invariants():
    sched = linear_schedule(1000)
    assert np.all(np.diff(sched.beta) > 0)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))
    np.testing.assert_array_equal(sched.alpha, 1.0 - sched.beta)


def test_running_product_matches_direct_product():
    sched = linear_schedule(1000)
    for t in (0, 1, 317, 999):
        direct = np.prod(sched.alpha[: t + 1])
        assert abs(sched.alpha_bar[t] - direct) < 1e-12


def test_invalid_schedule_parameters():
    with pytest.raises(ScheduleError):
        linear_schedule(1)
    with pytest.raises(ScheduleError):
        linear_schedule(10, 0.2, 0.1)
    with pytest.raises(ScheduleError):
        linear_schedule(10, 0.0, 0.1)
    with pytest.raises(ScheduleError):
        linear_schedule(10, 0.1, 1.0)


def test_diffuse_deterministic_branches():
    sched = linear_schedule(100, 0.001, 0.2)
    rng = np.random.default_rng(0)
    x0 = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    zero = Tensor(np.zeros((4, 3)), dtype=np.float64)
    t = 37
    got = diffuse(x0, t, zero, sched).data
    np.testing.assert_allclose(got, np.sqrt(sched.alpha_bar[t]) * x0.data, rtol=1e-12)

    noise = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    got = diffuse(zero, t, noise, sched).data
    np.testing.assert_allclose(got, np.sqrt(1 - sched.alpha_bar[t]) * noise.data, rtol=1e-12)


def test_diffuse_shape_mismatch():
    sched = linear_schedule(10, 0.01, 0.1)
    with pytest.raises(ScheduleError):
        diffuse(Tensor(np.zeros(3)), 2, Tensor(np.zeros(4)), sched)


def test_diffuse_then_ideal_inversion_recovers_x0():
    sched = linear_schedule(1000)
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(8,))
    eps = rng.normal(size=(8,))
    for t in (0, 250, 999):
        xt = diffuse(Tensor(x0, dtype=np.float64), t, Tensor(eps, dtype=np.float64), sched).data
        rec = (xt - np.sqrt(1 - sched.alpha_bar[t]) * eps) / np.sqrt(sched.alpha_bar[t])
        np.testing.assert_allclose(rec, x0, rtol=1e-9, atol=1e-12)


def test_diffuse_marginal_statistics_final_step():
    """At t=T-1 the marginal is almost pure noise: abar ~ 4e-5."""
    sched = linear_schedule(1000)
    t = 999
    assert sched.alpha_bar[t] == pytest.approx(4e-5, rel=0.15)
    rng = np.random.default_rng(2)
    x0_val = 0.7
    n = 100_000
    draws = np.sqrt(sched.alpha_bar[t]) * x0_val + np.sqrt(1 - sched.alpha_bar[t]) * rng.standard_normal(n)
    target_mean = np.sqrt(sched.alpha_bar[t]) * x0_val
    target_var = 1 - sched.alpha_bar[t]
    se_mean = np.sqrt(target_var / n)
    se_var = target_var * np.sqrt(2.0 / (n - 1))
    assert abs(draws.mean() - target_mean) < 4 * se_mean
    assert abs(draws.var(ddof=1) - target_var) < 4 * se_var


def test_denoise_step_deterministic_branch():
    sched = linear_schedule(1000)
    rng = np.random.default_rng(3)
    x0_hat = Tensor(rng.uniform(-1, 1, size=(5,)), dtype=np.float64)
    x_t = Tensor(rng.normal(size=(5,)), dtype=np.float64)
    zero = Tensor(np.zeros(5), dtype=np.float64)
    t = 412
    got = denoise_step(x_t, t, x0_hat, zero, sched).data
    np.testing.assert_allclose(got, np.sqrt(sched.alpha_bar[t - 1]) * x0_hat.data, rtol=1e-12)


def test_denoise_step_t1_constants():
    sched = linear_schedule(1000)
    assert sched.alpha_bar[0] == pytest.approx(0.9999)
    assert np.sqrt(sched.alpha_bar[0]) == pytest.approx(0.99995, abs=1e-6)
    assert np.sqrt(1 - sched.alpha_bar[0]) == pytest.approx(0.01, abs=1e-9)
    rng = np.random.default_rng(4)
    x0_hat = Tensor(rng.uniform(-1, 1, size=(6,)), dtype=np.float64)
    noise = Tensor(rng.normal(size=(6,)), dtype=np.float64)
    x_t = Tensor(np.zeros(6), dtype=np.float64)
    got = denoise_step(x_t, 1, x0_hat, noise, sched).data
    expected = np.sqrt(0.9999) * x0_hat.data + np.sqrt(1 - 0.9999) * noise.data
    np.testing.assert_allclose(got, expected, rtol=1e-9)


def test_denoise_step_rejects_t0():
    sched = linear_schedule(10, 0.01, 0.1)
    z = Tensor(np.zeros(2))
    with pytest.raises(ScheduleError):
        denoise_step(z, 0, z, z, sched)


def test_denoise_step_clips_prediction():
    sched = linear_schedule(10, 0.01, 0.1)
    big = Tensor(np.array([5.0, -5.0]), dtype=np.float64)
    zero = Tensor(np.zeros(2), dtype=np.float64)
    got = denoise_step(zero, 5, big, zero, sched).data
    np.testing.assert_allclose(got, np.sqrt(sched.alpha_bar[4]) * np.array([1.0, -1.0]))


def test_oracle_denoiser_chain_converges_to_target():
    """Reverse chain with a fixed-x* oracle lands within L-inf 0.05 of x*."""
    sched = linear_schedule(1000)
    rng = np.random.default_rng(5)
    x_star = rng.uniform(-0.9, 0.9, size=(16,))
    for seed in range(5):
        r = np.random.default_rng(seed)
        x = Tensor(r.standard_normal(16), dtype=np.float64)
        for t in range(sched.steps - 1, 0, -1):
            x0_hat = Tensor(x_star, dtype=np.float64)  # oracle prediction
            noise = Tensor(r.standard_normal(16), dtype=np.float64)
            x = denoise_step(x, t, x0_hat, noise, sched)
        # final chain state carries noise of std sqrt(1 - abar_0) = 0.01
        assert np.max(np.abs(x.data - x_star)) < 0.05
