"""
Fixed-step ODE solvers for the continuous residual.

Steps are unrolled on the gradient tape, so backward differentiates the
discrete computation exactly (discretize-then-optimize).
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .config import SUPPORTED_SOLVERS
from .logger import logger
from .tensor import Tensor, active_tape

VectorField = Callable[[Tensor, float], Tensor]


class OdeDivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"ODE state became non-finite at step {step}")


@dataclass
class OdeProblem:
    vector_field: VectorField
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 2
    method: str = "rk4"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.t1 > self.t0:
            raise ValueError(f"t1 must exceed t0, got [{self.t0}, {self.t1}]")
        if self.method not in SUPPORTED_SOLVERS:
            raise ValueError(f"Unknown ODE method '{self.method}'. Supported: {', '.join(SUPPORTED_SOLVERS)}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps


def euler_step(f: VectorField, h: Tensor, t: float, dt: float) -> Tensor:
    return h + f(h, t) * dt


def rk4_step(f: VectorField, h: Tensor, t: float, dt: float) -> Tensor:
    k1 = f(h, t)
    k2 = f(h + k1 * (dt / 2), t + dt / 2)
    k3 = f(h + k2 * (dt / 2), t + dt / 2)
    k4 = f(h + k3 * dt, t + dt)
    return h + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def _check_output(f: VectorField) -> VectorField:
    def checked(h: Tensor, t: float) -> Tensor:
        out = f(h, t)
        if out.shape != h.shape:
            raise ValueError(f"Vector field returned shape {out.shape} for state {h.shape}")
        return out
    return checked


def integrate_trajectory(problem: OdeProblem, h0: Tensor) -> List[Tensor]:
    """States at t0, t0+dt, ..., t1."""
    if not np.all(np.isfinite(h0.data)):
        raise OdeDivergenceError(0, "Initial state is not finite")
    step_fn = _STEPPERS[problem.method]
    f = _check_output(problem.vector_field)
    dt = problem.dt
    states = [h0]
    h = h0
    for i in range(problem.steps):
        h = step_fn(f, h, problem.t0 + i * dt, dt)
        if not np.all(np.isfinite(h.data)):
            raise OdeDivergenceError(i + 1)
        states.append(h)
    return states


def integrate(problem: OdeProblem, h0: Tensor) -> Tensor:
    return integrate_trajectory(problem, h0)[-1]


def integrate_adaptive(problem: OdeProblem, h0: Tensor, rtol: float = 1e-3, atol: float = 1e-6) -> Tensor:
    """
    Adaptive RK45 through scipy, for evaluation only.

    The vector field runs outside the tape, so no gradients flow; calling it
    while recording a differentiable pass is rejected.
    """
    if active_tape() is not None and h0.requires_grad:
        raise RuntimeError("Adaptive integration is evaluation-only; it cannot run on a recording tape")
    shape, dtype = h0.shape, h0.dtype

    def rhs(t, y):
        out = problem.vector_field(Tensor(y.reshape(shape).astype(dtype)), float(t))
        return out.data.astype(np.float64).reshape(-1)

    result = solve_ivp(rhs, (problem.t0, problem.t1), h0.data.astype(np.float64).reshape(-1),
                       method="RK45", rtol=rtol, atol=atol)
    if not result.success or not np.all(np.isfinite(result.y[:, -1])):
        raise OdeDivergenceError(int(result.nfev), f"Adaptive solver failed: {result.message}")
    logger.debug(f"RK45 finished", extra={"nfev": int(result.nfev)})
    return Tensor(result.y[:, -1].reshape(shape).astype(dtype))


def estimate_order(method: str, f: VectorField, h0: Tensor, analytic_solution: Callable[[float], np.ndarray],
                   t0: float = 0.0, t1: float = 1.0, resolutions: Sequence[int] = (8, 16, 32)) -> float:
    """
    Empirical convergence order log2(err(n) / err(2n)) averaged over `resolutions`.

    Returns math.inf when the solver is exact at every resolution.
    """
    exact = np.asarray(analytic_solution(t1), dtype=np.float64)

    def error(n: int) -> float:
        out = integrate(OdeProblem(f, t0, t1, n, method), h0)
        return float(np.max(np.abs(out.data.astype(np.float64) - exact)))

    orders = []
    for n in resolutions:
        coarse, fine = error(n), error(2 * n)
        if coarse == 0.0 or fine == 0.0:
            continue
        orders.append(math.log2(coarse / fine))
    if not orders:
        return math.inf
    return float(np.mean(orders))
