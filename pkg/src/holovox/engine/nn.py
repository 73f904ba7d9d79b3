"""Minimal parameter/module machinery on top of the tensor engine."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "Module", "Linear", "Conv2dLayer", "Conv3dLayer", "GroupNorm", "xavier_uniform"]


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        super().__init__(data, dtype=dtype, requires_grad=True, name=name)


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class; discovers parameters/submodules from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix=name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix=prefix)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        from ..dataio import CheckpointFormatError  # local import to avoid a cycle

        for name, p in self.named_parameters(prefix=prefix):
            if name not in arrays:
                raise CheckpointFormatError(f"missing parameter {name!r} in checkpoint")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)


class Linear(Module):
    """Dense layer y = x @ w + b with Xavier-uniform init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.w = Parameter(xavier_uniform((n_in, n_out), n_in, n_out, rng, dtype))
        self.b = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class Conv2dLayer(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        k2 = kernel * kernel
        self.w = Parameter(xavier_uniform((c_out, c_in, kernel, kernel),
                                          c_in * k2, c_out * k2, rng, dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        from .conv import conv2d

        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    """Group normalization over (B, C, *spatial); composed of primitives,
    so gradients come from the tape like everything else."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5,
                 dtype=np.float32):
        if channels % min(groups, channels) != 0:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = min(groups, channels)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import reshape, sqrt, tmean

        b, c = x.shape[0], x.shape[1]
        spatial = x.shape[2:]
        g = self.groups
        xg = reshape(x, (b, g, c // g) + spatial)
        axes = tuple(range(2, xg.ndim))
        mu = tmean(xg, axis=axes, keepdims=True)
        d = xg - mu
        var = tmean(d * d, axis=axes, keepdims=True)
        y = d / sqrt(var + self.eps)
        y = reshape(y, (b, c) + spatial)
        shape = (1, c) + (1,) * len(spatial)
        return y * reshape(self.gamma, shape) + reshape(self.beta, shape)


class Conv3dLayer(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        k3 = kernel ** 3
        self.w = Parameter(xavier_uniform((c_out, c_in, kernel, kernel, kernel),
                                          c_in * k3, c_out * k3, rng, dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        from .conv import conv3d

        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)
