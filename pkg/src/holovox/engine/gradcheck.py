"""Finite-difference gradient checking.

The reference is always a central difference computed by perturbing one
coordinate at a time, so it is independent of the reverse-mode path it
validates.  Relative error uses max(1, |a|, |b|) in the denominator to
stay meaningful near zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["grad_check", "grad_check_param", "GradCheckReport", "default_step",
           "default_tolerance"]


def default_step(dtype) -> float:
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-2


def default_tolerance(dtype) -> float:
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-3


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of reverse-mode vs central differences."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    tolerance: float
    step: float
    failures: list[tuple[tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.passed else f"{len(self.failures)} coordinate(s) failed"
        return (f"max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}, step {self.step:.1e}): {status}")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float | None = None,
               tolerance: float | None = None, sample: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued ``f`` at ``x``.

    ``f`` must be a pure function of its tensor argument.  Central
    differences cost two evaluations per coordinate, so for large inputs
    ``sample`` restricts the comparison to that many randomly chosen
    coordinates (the analytic gradient is still computed in full).
    Returns a report rather than raising, so callers decide how to treat
    failures.
    """
    if step is None:
        step = default_step(x.data.dtype)
    if tolerance is None:
        tolerance = default_tolerance(x.data.dtype)

    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        tape.backward(out)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(x.data)).astype(np.float64)

    size = x.data.size
    if sample is not None and sample < size:
        chooser = rng if rng is not None else np.random.default_rng(0)
        flat_idx = np.sort(chooser.choice(size, size=sample, replace=False))
        coords = [np.unravel_index(i, x.data.shape) for i in flat_idx]
    else:
        coords = [np.unravel_index(i, x.data.shape) for i in range(size)]

    flat = x.data.copy()
    numeric_sel = np.zeros(len(coords), dtype=np.float64)
    analytic_sel = np.zeros(len(coords), dtype=np.float64)
    for n, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = f(Tensor(flat.copy())).item()
        flat[idx] = orig - step
        f_minus = f(Tensor(flat.copy())).item()
        flat[idx] = orig
        numeric_sel[n] = (f_plus - f_minus) / (2.0 * step)
        analytic_sel[n] = analytic[idx]

    denom = np.maximum(1.0, np.maximum(np.abs(analytic_sel), np.abs(numeric_sel)))
    rel = np.abs(analytic_sel - numeric_sel) / denom
    failures = []
    for n in np.nonzero(rel > tolerance)[0]:
        failures.append((coords[n], float(analytic_sel[n]), float(numeric_sel[n]),
                         float(rel[n])))
    return GradCheckReport(analytic=analytic_sel, numeric=numeric_sel, rel_errors=rel,
                           tolerance=tolerance, step=step, failures=failures)


def grad_check_param(forward: Callable[[], Tensor], holder, attr: str,
                     step: float | None = None, tolerance: float | None = None,
                     sample: int | None = None,
                     rng: np.random.Generator | None = None) -> GradCheckReport:
    """FD-check gradients w.r.t. ``holder.<attr>`` (a parameter tensor).

    The attribute is temporarily replaced by the probe tensor for each
    evaluation, so ``forward`` picks it up through normal attribute
    access.  Restores the original parameter afterwards.
    """
    orig = getattr(holder, attr)

    def f(probe: Tensor) -> Tensor:
        setattr(holder, attr, probe)
        try:
            return forward()
        finally:
            setattr(holder, attr, orig)

    return grad_check(f, Tensor(orig.data.copy()), step=step, tolerance=tolerance,
                      sample=sample, rng=rng)
