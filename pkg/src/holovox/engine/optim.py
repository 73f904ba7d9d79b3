"""Adam optimizer with named first/second-moment buffers."""

from __future__ import annotations

import numpy as np

from .nn import Parameter

__all__ = ["Adam"]


class Adam:
    """Bias-corrected Adam over a list of (name, parameter) pairs.

    Moments are kept per parameter name so they serialize alongside the
    parameters in checkpoints.  ``lr`` is a plain mutable attribute; the
    trainer's plateau rule rewrites it.
    """

    def __init__(self, named_params: list[tuple[str, Parameter]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def state_arrays(self, prefix: str = "adam.") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, _ in self.named_params:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "adam.") -> None:
        from ..dataio import CheckpointFormatError

        for name, _ in self.named_params:
            for table, tag in ((self.m, "m"), (self.v, "v")):
                key = f"{prefix}{tag}.{name}"
                if key not in arrays:
                    raise CheckpointFormatError(f"missing optimizer buffer {key!r}")
                arr = arrays[key]
                if arr.shape != table[name].shape:
                    raise CheckpointFormatError(
                        f"optimizer buffer {key!r}: shape {arr.shape} != {table[name].shape}"
                    )
                table[name] = arr.astype(table[name].dtype, copy=True)
