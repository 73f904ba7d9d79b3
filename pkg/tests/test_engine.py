"""Core tensor/tape behaviour: forward values, backward semantics, errors."""

import numpy as np
import pytest

from holovox.engine import (
    DTypeError,
    NoTapeError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    clip,
    concat,
    cumsum,
    exp,
    leaky_relu,
    matmul,
    mul,
    no_grad,
    power,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    tanh,
    tmean,
    transpose,
    tsum,
)


def test_tanh_zero_is_zero():
    assert tanh(Tensor(0.0)).item() == 0.0


def test_softplus_zero_is_log_two():
    assert softplus(Tensor(0.0, dtype=np.float64)).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        loss = tsum(x * x)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_constant_loss_has_empty_gradient_set():
    params = [Tensor(np.ones(3), requires_grad=True) for _ in range(2)]
    with Tape() as tape:
        loss = Tensor(5.0)
        tape.backward(loss)
    assert all(p.grad is None for p in params)
    assert len(tape) == 0


def test_matmul_identity_backward():
    a = Tensor(np.eye(2), dtype=np.float64)
    x = Tensor(np.ones((2, 1)), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        loss = tsum(matmul(a, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.ones((2, 1)))


def test_repeated_backward_accumulates():
    x = Tensor([2.0], dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        loss = tsum(x * x)
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_without_tape_raises():
    x = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(NoTapeError):
        backward(x)


def test_shape_mismatch_names_primitive_and_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError) as exc:
        add(a, b)
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "matmul" in str(exc.value)


def test_mixed_dtypes_rejected():
    a = Tensor(np.ones(2), dtype=np.float32)
    b = Tensor(np.ones(2), dtype=np.float64)
    with pytest.raises(DTypeError):
        mul(a, b)


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert len(tape) == 0


def test_recording_only_inside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0  # no tape active
    assert not y.requires_grad


def test_broadcast_trailing_singleton():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([[10.0], [20.0]]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(a * b)
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (2, 3)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=1, keepdims=True))


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    xd = rng.normal(size=(4, 4))

    def grads(fn):
        x = Tensor(xd, dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            tape.backward(fn(x))
        return x.grad

    gf = grads(lambda x: tsum(tanh(x)))
    gg = grads(lambda x: tsum(x * x))
    combined = grads(lambda x: 2.5 * tsum(tanh(x)) + (-1.25) * tsum(x * x))
    np.testing.assert_allclose(combined, 2.5 * gf - 1.25 * gg, rtol=1e-12, atol=1e-12)


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(7)
    xd = rng.normal(size=(16, 16)).astype(np.float32)
    wd = rng.normal(size=(16, 16)).astype(np.float32)

    def run():
        x = Tensor(xd)
        w = Tensor(wd)
        return tsum(sigmoid(matmul(x, w)) * softplus(x)).data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_detach_blocks_gradient():
    x = Tensor([3.0], dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        loss = tsum(y.detach() * x)
        tape.backward(loss)
    # d/dx of const(2x) * x = 2x = 6, not 4x
    np.testing.assert_allclose(x.grad, [6.0])


def test_cumsum_forward_and_backward():
    x = Tensor(np.arange(1.0, 7.0).reshape(2, 3), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        c = cumsum(x, axis=1)
        np.testing.assert_allclose(c.data, [[1, 3, 6], [4, 9, 15]])
        loss = tsum(c * Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[1, 0, 0], [1, 1, 1]])


def test_concat_reshape_transpose_roundtrip():
    a = Tensor(np.ones((2, 3)), dtype=np.float64, requires_grad=True)
    b = Tensor(np.ones((2, 2)), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        c = concat([a, b], axis=1)  # (2,5)
        d = transpose(reshape(c, (5, 2)), (1, 0))
        loss = tsum(d * d)
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, 2 * np.ones((2, 2)))


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 7)) * 10)
    s = softmax(x, axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(5), rtol=1e-6)


def test_clip_band_and_subgradient():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        y = clip(x, -1.0, 1.0)
        np.testing.assert_allclose(y.data, [-1.0, -0.5, 0.5, 1.0])
        tape.backward(tsum(y))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0, 0.0])


def test_leaky_relu_uses_left_subgradient_at_zero():
    x = Tensor(np.array([0.0]), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(leaky_relu(x, slope=0.01)))
    np.testing.assert_allclose(x.grad, [0.01])


def test_item_and_scalar_chain():
    x = Tensor(4.0, dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        y = sqrt(x) * 3.0 + 1.0
        tape.backward(tsum(y))
    assert y.item() == pytest.approx(7.0)
    np.testing.assert_allclose(x.grad, [3.0 / 4.0] if x.grad.shape else 0.75)


def test_power_and_exp_values():
    x = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    np.testing.assert_allclose(power(x, 3.0).data, [1.0, 8.0])
    np.testing.assert_allclose(exp(Tensor(0.0)).item(), 1.0)


def test_mean_matches_sum_over_count():
    x = Tensor(np.arange(12.0).reshape(3, 4), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        m = tmean(x, axis=0)
        tape.backward(tsum(m))
    np.testing.assert_allclose(m.data, x.data.mean(axis=0))
    np.testing.assert_allclose(x.grad, np.full((3, 4), 1.0 / 3.0))
