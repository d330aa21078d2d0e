import math

import numpy as np
import pytest

from stcvit.tensor import (
    DetachedGraphError, GradientTape, GradientTapeError, NonDeterministicFunctionError, NonFiniteError, ShapeError,
    Tensor, concat, debug_mode, default_dtype, dropout, gelu, grad_check, layer_norm, matmul, softmax, stack,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_adjoint_with_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor(np.eye(2))
    with GradientTape() as tape:
        loss = matmul(a, b).sum()
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((2, 2)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_softmax_symmetric_and_stable():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_closed_form():
    with default_dtype(np.float64):
        out = softmax(Tensor([math.log(1), math.log(2), math.log(3)]))
    np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)


def test_softmax_sums_to_one(rng):
    for _ in range(100):
        x = Tensor(rng.normal(scale=10.0, size=(3, 7)))
        s = softmax(x, axis=-1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_constant_row_collapses_to_bias():
    out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0])


def test_layer_norm_unit_input():
    out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-3)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient_64bit(rng):
    with default_dtype(np.float64):
        gain = Tensor(rng.normal(size=8))
        bias = Tensor(rng.normal(size=8))
        w = Tensor(rng.normal(size=(4, 8)))
        report = grad_check(lambda x: (layer_norm(x, gain, bias) * w).sum(), Tensor(rng.normal(size=(4, 8))))
    assert report.max_rel_error < 1e-5


def test_layer_norm_gradient_32bit(rng):
    w = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
    x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
    report = grad_check(
        lambda t: (layer_norm(t, Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32))) * w).sum(),
        x, step=1e-3, tol=1e-3,
    )
    scale = np.max(np.abs(report.numeric))
    assert np.max(np.abs(report.analytic - report.numeric)) / scale < 1e-3


def test_concat_extents():
    out = concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=-1)
    assert out.shape == (2, 8)


def test_concat_mismatch_rejected():
    with pytest.raises(ShapeError):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5)))], axis=-1)


def test_invalid_axis_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))).sum(axis=2)


def test_stack_adds_axis():
    out = stack([Tensor(np.ones(3)), Tensor(np.zeros(3))], axis=0)
    assert out.shape == (2, 3)


def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert dropout(x, 0.0, rng) is x
    assert dropout(x, 0.5, rng, training=False) is x


def test_dropout_inverted_scaling(rng):
    x = Tensor(np.ones(10000))
    out = dropout(x, 0.25, rng).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)
    assert abs(out.mean() - 1.0) < 0.05


def test_gelu_zero_and_gradient():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    with default_dtype(np.float64):
        report = grad_check(lambda x: gelu(x).sum(), Tensor([1.0]))
    assert report.max_rel_error < 1e-5


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradientTape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_unused_leaf_gets_zeros():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([5.0, 6.0], requires_grad=True)
    with GradientTape() as tape:
        _ = b * 2.0
        loss = (a * a).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_backward_accumulates_over_uses():
    x = Tensor([3.0], requires_grad=True)
    with GradientTape() as tape:
        loss = (x * 2.0 + x * 5.0 + x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_twice_rejected():
    x = Tensor([1.0], requires_grad=True)
    with GradientTape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    with pytest.raises(GradientTapeError):
        tape.backward(loss)


def test_backward_after_reset_records_again():
    x = Tensor([2.0], requires_grad=True)
    tape = GradientTape()
    with tape:
        loss = (x * x).sum()
    tape.backward(loss)
    tape.reset()
    x.zero_grad()
    with tape:
        loss = (x * x * x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_non_scalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradientTape() as tape:
        y = x * x
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_backward_detached_rejected():
    with pytest.raises(DetachedGraphError):
        Tensor(1.0).backward()


def test_backward_empty_tape_rejected():
    tape = GradientTape()
    with pytest.raises(GradientTapeError):
        tape.backward(Tensor(1.0))


def test_adjoint_linearity(rng):
    with default_dtype(np.float64):
        x = Tensor(rng.normal(size=5), requires_grad=True)

        def f(t):
            return (t * t * t).sum()

        def g(t):
            return t.exp().sum()

        grads = []
        for fn in (f, g, lambda t: f(t) * 2.0 + g(t) * -3.0):
            x.zero_grad()
            with GradientTape() as tape:
                loss = fn(x)
            tape.backward(loss)
            grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], 2.0 * grads[0] - 3.0 * grads[1], rtol=1e-12)


def test_grad_check_square():
    with default_dtype(np.float64):
        report = grad_check(lambda x: (x * x).sum(), Tensor([3.0]), step=1e-4)
    np.testing.assert_allclose(report.analytic, [6.0])
    assert report.max_rel_error < 1e-7


def test_grad_check_softmax_cross_entropy(rng):
    with default_dtype(np.float64):
        onehot = Tensor(np.eye(5)[2])
        logits = Tensor(rng.normal(size=5))
        report = grad_check(lambda x: -(softmax(x).log() * onehot).sum(), logits)
    assert report.max_rel_error < 1e-4


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, Tensor([1.0, 2.0]))


def test_grad_check_rejects_step_out_of_range():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), Tensor([1.0]), step=1e-1)


def test_grad_check_rejects_training_dropout(rng):
    with pytest.raises(NonDeterministicFunctionError):
        grad_check(lambda x: dropout(x, 0.5, rng).sum(), Tensor(np.ones(4)))


def test_pointwise_ops_match_finite_differences(rng):
    ops = [
        lambda x: (x * x).sum(),
        lambda x: (x / (x * x + 1.0)).sum(),
        lambda x: (x - x * 3.0).exp().mean(),
        lambda x: (x * x + 1.0).log().sum(),
        lambda x: ((x * x + 1.0) ** 1.5).sum(),
        lambda x: (x * x + 2.0).sqrt().sum(),
        lambda x: gelu(x).sum(),
        lambda x: softmax(x.reshape(2, 3), axis=0)[0, 1] * 3.0,
        lambda x: (x.reshape(3, 2).transpose() @ x.reshape(3, 2)).sum(),
        lambda x: concat([x[:2], x[3:] * 2.0], axis=0).mean(),
    ]
    with default_dtype(np.float64):
        for _ in range(100):
            for op in ops:
                report = grad_check(op, Tensor(rng.normal(size=6)))
                assert report.max_rel_error < 1e-5, report


def test_debug_mode_flags_non_finite():
    with debug_mode(), np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError):
            Tensor([0.0]).log()


def test_default_dtype_context():
    assert Tensor([1.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_dtype_preserved_for_numpy_scalars():
    assert Tensor(np.float64(2.0)).dtype == np.float64


def test_deterministic_outputs(rng):
    data = rng.normal(size=(4, 4))

    def run():
        local = np.random.default_rng(7)
        return dropout(softmax(Tensor(data)), 0.1, local).data

    np.testing.assert_array_equal(run(), run())
