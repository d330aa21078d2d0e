import math

import numpy as np
import pytest

from stcvit.ode import (
    OdeDivergenceError, OdeProblem, estimate_order, integrate, integrate_adaptive, integrate_trajectory,
)
from stcvit.tensor import GradientTape, Tensor, default_dtype, grad_check


def identity_field(h, t):
    return h


@pytest.fixture
def one():
    return Tensor(np.array([1.0]))


def test_zero_field_returns_initial_state_exactly():
    h0 = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    for method in ("euler", "rk4"):
        out = integrate(OdeProblem(lambda h, t: h * 0.0, 0.0, 1.0, 5, method), h0)
        np.testing.assert_array_equal(out.data, h0.data)


def test_rk4_reproduces_e(one):
    out = integrate(OdeProblem(identity_field, 0.0, 1.0, 10, "rk4"), one)
    assert abs(out.item() - math.e) < 1e-5


def test_euler_matches_closed_form_recurrence(one):
    out = integrate(OdeProblem(identity_field, 0.0, 1.0, 10, "euler"), one)
    assert abs(out.item() - 1.1 ** 10) < 1e-12
    assert abs(out.item() - 2.5937) < 1e-4


def test_estimate_order_euler(one):
    order = estimate_order("euler", identity_field, one, lambda t: np.array([math.exp(t)]))
    assert 0.8 <= order <= 1.2


def test_estimate_order_rk4(one):
    order = estimate_order("rk4", identity_field, one, lambda t: np.array([math.exp(t)]))
    assert 3.5 <= order <= 4.5


def test_estimate_order_exact_solver_is_infinite(one):
    order = estimate_order("rk4", lambda h, t: h * 0.0, one, lambda t: np.array([1.0]))
    assert order == math.inf


def test_linear_system_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    a *= 0.9 / np.max(np.abs(np.linalg.eigvals(a)))
    h0 = rng.normal(size=(3, 1))

    expm = np.eye(3)
    term = np.eye(3)
    for k in range(1, 40):
        term = term @ a / k
        expm = expm + term

    out = integrate(OdeProblem(lambda h, t: Tensor(a) @ h, 0.0, 1.0, 32, "rk4"), Tensor(h0))
    np.testing.assert_allclose(out.data, expm @ h0, atol=1e-6)


def test_gradient_through_unrolled_solver():
    h0 = Tensor(np.array([0.7, -0.3]))

    def loss(theta):
        problem = OdeProblem(lambda h, t: h * theta, 0.0, 1.0, 4, "rk4")
        return (integrate(problem, h0) * integrate(problem, h0)).sum()

    with default_dtype(np.float64):
        report = grad_check(loss, Tensor(np.array([0.4])))
    assert report.max_rel_error < 1e-4


def test_trajectory_has_every_step(one):
    states = integrate_trajectory(OdeProblem(identity_field, 0.0, 1.0, 4, "euler"), one)
    assert len(states) == 5
    np.testing.assert_allclose([s.item() for s in states], [1.25 ** i for i in range(5)])


def test_divergence_reports_step():
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(OdeDivergenceError) as exc:
            integrate(OdeProblem(lambda h, t: h * 1e308, 0.0, 1.0, 3, "euler"), Tensor(np.array([10.0])))
    assert exc.value.step == 1


def test_non_finite_initial_state_rejected():
    with pytest.raises(OdeDivergenceError) as exc:
        integrate(OdeProblem(identity_field), Tensor(np.array([np.nan])))
    assert exc.value.step == 0


def test_vector_field_shape_checked(one):
    with pytest.raises(ValueError):
        integrate(OdeProblem(lambda h, t: Tensor(np.zeros(3))), one)


@pytest.mark.parametrize("kwargs", [dict(steps=0), dict(t0=1.0, t1=1.0), dict(method="dopri5")])
def test_invalid_problem_rejected(kwargs):
    with pytest.raises(ValueError):
        OdeProblem(identity_field, **kwargs)


def test_adaptive_solver_close_to_e(one):
    out = integrate_adaptive(OdeProblem(identity_field), one, rtol=1e-6, atol=1e-9)
    assert abs(out.item() - math.e) < 1e-4


def test_adaptive_solver_rejected_on_recording_tape():
    h0 = Tensor(np.array([1.0]), requires_grad=True)
    with GradientTape():
        with pytest.raises(RuntimeError):
            integrate_adaptive(OdeProblem(identity_field), h0)
