"""Finite-difference verification suites behind ``holovox gradcheck``.

Every differentiable primitive and the three composed paths
(grid -> render -> loss, denoiser params -> render -> loss,
encoder/accumulator -> auxiliary grid -> loss) are checked against
central differences at randomly drawn points, on float64 (tolerance
1e-5) and float32 (tolerance 1e-3).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .engine import (
    GradCheckReport,
    Tensor,
    add,
    clip,
    concat,
    conv2d,
    conv3d,
    cumsum,
    div,
    exp,
    grad_check,
    leaky_relu,
    log,
    matmul,
    mul,
    neg,
    power,
    reshape,
    sample_bilinear,
    sample_trilinear,
    sigmoid,
    softplus,
    sqrt,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
    upsample3d_nearest,
    upsample3d_trilinear,
)

__all__ = ["CheckResult", "run_gradcheck_suite"]


@dataclass
class CheckResult:
    name: str
    dtype: str
    passed: bool
    max_rel_error: float
    tolerance: float
    points: int

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<42s} [{self.dtype}] "
                f"max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, "
                f"{self.points} points)")


def _steps_for(dtype) -> float:
    return 1e-5 if dtype == np.float64 else 5e-3


def _tol_for(dtype) -> float:
    return 1e-5 if dtype == np.float64 else 1e-3


def _scalarize(t: Tensor) -> Tensor:
    return tmean(t * t)


def _primitive_checks() -> list[tuple[str, Callable]]:
    """name -> builder(rng, dtype) returning (f, x)."""

    def unary(fn, lo, hi, shape=(3, 4)):
        def build(rng, dtype):
            x = Tensor(rng.uniform(lo, hi, size=shape), dtype=dtype)
            return (lambda t: _scalarize(fn(t))), x
        return build

    def binary(fn, lo=0.5, hi=2.0, shape=(3, 4)):
        def build(rng, dtype):
            other = Tensor(rng.uniform(lo, hi, size=shape), dtype=dtype)
            x = Tensor(rng.uniform(lo, hi, size=shape), dtype=dtype)
            return (lambda t: _scalarize(fn(t, other)) + _scalarize(fn(other, t))), x
        return build

    def conv2_build(stride):
        def build(rng, dtype):
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 6, 5)), dtype=dtype)
            w = Tensor(rng.uniform(-0.5, 0.5, size=(3, 2, 3, 3)), dtype=dtype)
            bias = Tensor(rng.uniform(-0.2, 0.2, size=(3,)), dtype=dtype)

            def f(t):
                return _scalarize(conv2d(t, w, bias, stride=stride, padding=1))
            return f, x
        return build

    def conv2w_build(stride):
        def build(rng, dtype):
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 6, 5)), dtype=dtype)
            w = Tensor(rng.uniform(-0.5, 0.5, size=(3, 2, 3, 3)), dtype=dtype)

            def f(t):
                return _scalarize(conv2d(x, t, stride=stride, padding=1))
            return f, w
        return build

    def conv3_build(stride):
        def build(rng, dtype):
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 4, 5, 4)), dtype=dtype)
            w = Tensor(rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3, 3)), dtype=dtype)
            bias = Tensor(rng.uniform(-0.2, 0.2, size=(2,)), dtype=dtype)

            def f(t):
                return _scalarize(conv3d(t, w, bias, stride=stride, padding=1))
            return f, x
        return build

    def conv3w_build(stride):
        def build(rng, dtype):
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 4, 5, 4)), dtype=dtype)
            w = Tensor(rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3, 3)), dtype=dtype)

            def f(t):
                return _scalarize(conv3d(x, t, stride=stride, padding=1))
            return f, w
        return build

    def matmul_build(rng, dtype):
        a = Tensor(rng.uniform(-1, 1, size=(3, 4)), dtype=dtype)
        x = Tensor(rng.uniform(-1, 1, size=(4, 2)), dtype=dtype)
        return (lambda t: _scalarize(matmul(a, t))), x

    def concat_build(rng, dtype):
        other = Tensor(rng.uniform(-1, 1, size=(2, 3)), dtype=dtype)
        x = Tensor(rng.uniform(-1, 1, size=(2, 2)), dtype=dtype)
        return (lambda t: _scalarize(concat([other, t], axis=1))), x

    def upsample_build(fn):
        def build(rng, dtype):
            x = Tensor(rng.uniform(-1, 1, size=(1, 2, 2, 3, 2)), dtype=dtype)
            return (lambda t: _scalarize(fn(t, 2))), x
        return build

    def bilinear_build(rng, dtype):
        pts = rng.uniform(0.15, 3.8, size=(8, 2))
        pts += np.where(np.abs(pts - np.round(pts)) < 0.06, 0.08, 0.0)
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 5)), dtype=dtype)
        return (lambda t: _scalarize(sample_bilinear(t, pts))), x

    def trilinear_build(rng, dtype):
        pts = rng.uniform(0.15, 2.8, size=(8, 3))
        pts += np.where(np.abs(pts - np.round(pts)) < 0.06, 0.08, 0.0)
        x = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), dtype=dtype)
        return (lambda t: _scalarize(sample_trilinear(t, pts))), x

    def trilinear_coords_build(rng, dtype):
        vol = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), dtype=dtype)
        pts = rng.uniform(0.15, 2.8, size=(6, 3))
        pts += np.where(np.abs(pts - np.round(pts)) < 0.1, 0.12, 0.0)
        return (lambda t: _scalarize(sample_trilinear(vol, t))), Tensor(pts, dtype=dtype)

    return [
        ("add", binary(add)),
        ("sub", binary(sub)),
        ("mul", binary(mul)),
        ("div", binary(div, lo=0.6, hi=2.0)),
        ("neg", unary(neg, -2, 2)),
        ("exp", unary(exp, -1.5, 1.2)),
        ("log", unary(log, 0.4, 3.0)),
        ("sqrt", unary(sqrt, 0.4, 3.0)),
        ("power_3", unary(lambda t: power(t, 3.0), 0.4, 1.6)),
        ("tanh", unary(tanh, -2, 2)),
        ("sigmoid", unary(sigmoid, -3, 3)),
        ("softplus", unary(softplus, -3, 3)),
        ("leaky_relu", unary(lambda t: leaky_relu(t, 0.01), 0.1, 2.0)),
        ("leaky_relu_negative", unary(lambda t: leaky_relu(t, 0.01), -2.0, -0.1)),
        ("clip_interior", unary(lambda t: clip(t, -10, 10), -2, 2)),
        ("sum_axis", unary(lambda t: tsum(t, axis=1), -2, 2)),
        ("mean_axis", unary(lambda t: tmean(t, axis=0, keepdims=True), -2, 2)),
        ("cumsum", unary(lambda t: cumsum(t, axis=1), -2, 2)),
        ("reshape", unary(lambda t: reshape(t, (4, 3)), -2, 2)),
        ("transpose", unary(lambda t: transpose(t, (1, 0)), -2, 2)),
        ("matmul", matmul_build),
        ("concat", concat_build),
        ("conv2d_stride1", conv2_build(1)),
        ("conv2d_stride2", conv2_build(2)),
        ("conv2d_weights", conv2w_build(1)),
        ("conv3d_stride1", conv3_build(1)),
        ("conv3d_stride2", conv3_build(2)),
        ("conv3d_weights", conv3w_build(2)),
        ("upsample3d_nearest", upsample_build(upsample3d_nearest)),
        ("upsample3d_trilinear", upsample_build(upsample3d_trilinear)),
        ("sample_bilinear", bilinear_build),
        ("sample_trilinear", trilinear_build),
        ("sample_trilinear_coords", trilinear_coords_build),
    ]


def _composed_checks() -> list[tuple[str, Callable]]:
    from .geometry import look_at, ring_cameras
    from .renderer import RenderConfig, RenderMLP, render
    from .denoiser import Denoiser3D, DenoiserConfig, denoise
    from .unprojector import Accumulator, ImageEncoder, build_auxiliary_grid
    from .voxel_grid import FeatureGrid

    def cam(size=6):
        return look_at((2.4, 0.8, 0.5), (0, 0, 0), fx=size * 1.2, fy=size * 1.2,
                       cx=size / 2, cy=size / 2, width=size, height=size)

    def grid_render_build(rng, dtype):
        mlp = RenderMLP(feature_dim=2, rng=rng, hidden=8, dtype=dtype)
        camera = cam()
        cfg = RenderConfig(n_samples=5)

        def f(t):
            out = render(FeatureGrid(t), camera, mlp, cfg)
            return tmean(out.rgb)
        x = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), dtype=dtype)
        return f, x

    def mlp_render_build(rng, dtype):
        mlp = RenderMLP(feature_dim=2, rng=rng, hidden=8, dtype=dtype)
        grid = FeatureGrid(Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), dtype=dtype))
        camera = cam()
        cfg = RenderConfig(n_samples=5)
        orig = mlp.layer2.w

        def f(t):
            mlp.layer2.w = t
            try:
                return tmean(render(grid, camera, mlp, cfg).rgb)
            finally:
                mlp.layer2.w = orig
        return f, Tensor(orig.data.copy())

    def denoiser_render_build(rng, dtype):
        dcfg = DenoiserConfig(channels=2, base_width=8, channel_mults=(1, 2),
                              res_blocks=1, attention=False, embed_width=16,
                              groups=2, total_steps=20)
        model = Denoiser3D(dcfg, rng, dtype=dtype)
        mlp = RenderMLP(feature_dim=2, rng=rng, hidden=8, dtype=dtype)
        grid = FeatureGrid(Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)), dtype=dtype))
        camera = cam()
        cfg = RenderConfig(n_samples=4)
        orig = model.mid1.conv1.w

        def f(t):
            model.mid1.conv1.w = t
            try:
                pred = denoise(model, grid, 3)
                return tmean(render(pred, camera, mlp, cfg).rgb)
            finally:
                model.mid1.conv1.w = orig
        return f, Tensor(orig.data.copy())

    def encoder_grid_build(rng, dtype):
        enc = ImageEncoder(rng, feat_dim=8, dtype=dtype)
        acc = Accumulator(rng, feat_dim=8, out_dim=2, hidden=8, dtype=dtype)
        cams = ring_cameras(2, radius=2.6, elevation=0.3, image_size=8, focal=9)
        frames = [(rng.uniform(0, 1, size=(3, 8, 8)).astype(dtype), c) for c in cams]
        orig = enc.conv2.w

        def f(t):
            enc.conv2.w = t
            try:
                grid = build_auxiliary_grid(frames, enc, acc, resolution=3)
                return tmean(grid.data * grid.data)
            finally:
                enc.conv2.w = orig
        return f, Tensor(orig.data.copy())

    def accumulator_grid_build(rng, dtype):
        enc = ImageEncoder(rng, feat_dim=8, dtype=dtype)
        acc = Accumulator(rng, feat_dim=8, out_dim=2, hidden=8, dtype=dtype)
        cams = ring_cameras(2, radius=2.6, elevation=0.3, image_size=8, focal=9)
        frames = [(rng.uniform(0, 1, size=(3, 8, 8)).astype(dtype), c) for c in cams]
        orig = acc.weight_head.w

        def f(t):
            acc.weight_head.w = t
            try:
                grid = build_auxiliary_grid(frames, enc, acc, resolution=3)
                return tmean(grid.data * grid.data)
            finally:
                acc.weight_head.w = orig
        return f, Tensor(orig.data.copy())

    return [
        ("path_grid_to_render_loss", grid_render_build),
        ("path_rendermlp_to_loss", mlp_render_build),
        ("path_denoiser_to_render_loss", denoiser_render_build),
        ("path_encoder_to_aux_grid_loss", encoder_grid_build),
        ("path_accumulator_to_aux_grid_loss", accumulator_grid_build),
    ]


def run_gradcheck_suite(full: bool = False, progress=None) -> list[CheckResult]:
    """Run every check at both dtypes; >= 20 random points each with
    ``full``, a quick subset otherwise."""
    n_points = 20 if full else 5
    coord_sample = 4
    results: list[CheckResult] = []
    all_checks = _primitive_checks() + _composed_checks()
    for name, build in all_checks:
        for dtype in (np.float64, np.float32):
            worst = 0.0
            ok = True
            for point in range(n_points):
                rng = np.random.default_rng(hash((name, str(dtype), point)) % 2 ** 32)
                f, x = build(rng, dtype)
                step = _steps_for(x.data.dtype)
                tol = _tol_for(x.data.dtype)
                rep: GradCheckReport = grad_check(
                    f, x, step=step, tolerance=tol,
                    sample=coord_sample if x.size > coord_sample else None, rng=rng)
                worst = max(worst, rep.max_rel_error)
                ok = ok and rep.passed
            res = CheckResult(name=name, dtype=np.dtype(dtype).name, passed=ok,
                              max_rel_error=worst,
                              tolerance=_tol_for(dtype), points=n_points)
            results.append(res)
            if progress is not None:
                progress(res.line())
    return results
