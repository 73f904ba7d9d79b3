"""Reverse-mode autodiff engine: tensors, tape, primitives, grad checking."""

from .tensor import (
    DTypeError,
    EngineError,
    NoTapeError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeRecord,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    cumsum,
    div,
    exp,
    leaky_relu,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    set_check_finite,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .conv import conv2d, conv3d, upsample3d_nearest, upsample3d_trilinear
from .sampling import sample_bilinear, sample_trilinear
from .nn import Conv2dLayer, Conv3dLayer, GroupNorm, Linear, Module, Parameter, xavier_uniform
from .optim import Adam
from .gradcheck import GradCheckReport, grad_check, grad_check_param, default_step, default_tolerance

__all__ = [name for name in dir() if not name.startswith("_")]
