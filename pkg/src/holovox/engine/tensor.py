"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Every differentiable operation in the library funnels through the
primitives defined here.  A primitive computes its forward value with
numpy, and, while a :class:`Tape` is active and some input requires a
gradient, appends one :class:`TapeRecord` holding a backward closure.
``Tape.backward`` then replays the records once, in reverse order.

Tensors are immutable after creation except for their gradient slot.
Storage is dense row-major float32 or float64; the dtype is fixed at
construction and never promoted implicitly (mixing dtypes is an error,
so float64 oracle runs cannot silently touch float32 code paths).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "TapeRecord",
    "EngineError",
    "ShapeError",
    "DTypeError",
    "NonFiniteError",
    "NoTapeError",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "power",
    "tanh",
    "sigmoid",
    "softplus",
    "leaky_relu",
    "clip",
    "tsum",
    "tmean",
    "cumsum",
    "concat",
    "reshape",
    "transpose",
    "softmax",
    "silu",
    "as_tensor",
    "set_check_finite",
]


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    pass


class DTypeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


class NoTapeError(EngineError):
    pass


_ALLOWED_DTYPES = (np.float32, np.float64)

# When True, every primitive asserts its output is finite.  Costs one
# pass over the data per op, so it is off by default and switched on by
# oracle/debug runs.
_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class _State(threading.local):
    def __init__(self):
        self.tape_stack: list["Tape"] = []
        self.grad_enabled: bool = True


_STATE = _State()


def _current_tape() -> Optional["Tape"]:
    if not _STATE.grad_enabled or not _STATE.tape_stack:
        return None
    return _STATE.tape_stack[-1]


class no_grad:
    """Context manager that disables recording on any active tape."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float array plus an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_creator")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in _ALLOWED_DTYPES:
                arr = arr.astype(np.float64)
        else:
            dtype = np.dtype(dtype).type
            if dtype not in _ALLOWED_DTYPES:
                raise DTypeError(f"unsupported dtype {dtype}; use float32 or float64")
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._creator: Optional["TapeRecord"] = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{req}{nm})"

    # -- gradient slot ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(np.dtype(dtype).type), requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class TapeRecord:
    """One executed primitive: its operands, result and backward closure.

    ``backward`` maps dL/d(output) to a tuple of dL/d(input) arrays
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed primitives (define-by-run, rebuilt per pass)."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _STATE.tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STATE.tape_stack.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dx into ``x.grad`` for every reachable leaf.

        The record list is already in topological order, so one reverse
        sweep visits each record exactly once.  Intermediate gradients
        live in a local table; only leaves (tensors not produced by this
        tape) have their persistent ``grad`` slot updated, which makes
        repeated calls accumulate.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        produced = {id(rec.output) for rec in self.records}
        table: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for rec in reversed(self.records):
            entry = table.pop(id(rec.output), None)
            if entry is None:
                continue
            grads = rec.backward(entry[1])
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in table:
                    table[key] = (inp, table[key][1] + g)
                else:
                    table[key] = (inp, g)
        for key, (tensor, g) in table.items():
            if tensor.requires_grad and key not in produced:
                tensor.accumulate_grad(np.asarray(g))


def backward(loss: Tensor) -> None:
    """Run the backward pass for ``loss`` on the innermost active tape."""
    tape = _STATE.tape_stack[-1] if _STATE.tape_stack else None
    if tape is None:
        raise NoTapeError("backward() called with no active Tape")
    tape.backward(loss)


# -- primitive plumbing ------------------------------------------------------


def as_tensor(value, like: Optional[Tensor] = None, dtype=None) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    if dtype is None and like is not None:
        dtype = like.data.dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _require_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise DTypeError(
            f"{op}: mixed dtypes {a.data.dtype.name} and {b.data.dtype.name}; "
            "cast explicitly"
        )


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]) -> Tensor:
    """Create the result tensor and record the primitive if needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    tape = _current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        rec = TapeRecord(op, inputs, out, backward_fn)
        out._creator = rec
        tape.records.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ops --------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _require_same_dtype("add", a, b)
    _broadcast_check("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _require_same_dtype("sub", a, b)
    _broadcast_check("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _require_same_dtype("mul", a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _require_same_dtype("div", a, b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _emit("neg", -a.data, (a,), bwd)


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes with numpy batch semantics."""
    a = as_tensor(a)
    b = as_tensor(b)
    _require_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


# -- elementwise unary ops ---------------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _emit("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _emit("log", np.log(ad), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _emit("sqrt", out, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    out = ad ** p

    def bwd(g):
        return (g * p * ad ** (p - 1.0),)

    return _emit("power", out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(np.asarray(0.0, dtype=ad.dtype), ad)

    def bwd(g):
        return (g * expit(ad),)

    return _emit("softplus", out, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """Leaky ReLU; at x = 0 the subgradient of the left branch is used."""
    a = as_tensor(a)
    ad = a.data
    # one factor buffer shared by forward and backward
    fac = np.where(ad > 0.0, ad.dtype.type(1.0), ad.dtype.type(slope))

    def bwd(g):
        return (g * fac,)

    return _emit("leaky_relu", ad * fac, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside the band."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    out = np.clip(ad, lo, hi)

    def bwd(g):
        return (np.where(inside, g, 0.0).astype(ad.dtype),)

    return _emit("clip", out, (a,), bwd)


# -- reductions and shape ops ------------------------------------------------


def _norm_axis(axis, ndim) -> Optional[tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if ax is None:
            return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=True),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).astype(a.data.dtype, copy=True),)

    return _emit("sum", np.asarray(out), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=ax, keepdims=keepdims)
    shape = a.shape
    if ax is None:
        count = a.size
    else:
        count = 1
        for i in ax:
            count *= shape[i]
    inv = 1.0 / count

    def bwd(g):
        gg = g * inv
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).astype(a.data.dtype, copy=True),)

    return _emit("mean", np.asarray(out), (a,), bwd)


def cumsum(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

    return _emit("cumsum", np.cumsum(a.data, axis=ax), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty tensor list")
    for t in ts[1:]:
        _require_same_dtype("concat", ts[0], t)
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _emit("concat", out, tuple(ts), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _emit("reshape", out, (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _emit("transpose", a.data.transpose(axes), (a,), bwd)


# -- composed conveniences (not primitives) ----------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # The max shift is a constant w.r.t. differentiation: softmax is
    # invariant to it, so the gradient is unchanged.
    shift = as_tensor(np.max(a.data, axis=axis, keepdims=True), like=a)
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))
