"""Levenberg-Marquardt driver for parameters living on a manifold.

The driver is agnostic to how the parameter state is represented. Callers
supply a ``cost`` function, a ``linearize`` function returning whatever the
linear ``solve`` needs, and a ``retract`` that applies a tangent step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


@dataclass(frozen=True)
class LMSettings:
    initial_damping: float = 1e-4
    increase: float = 10.0
    decrease: float = 1.0 / 3.0
    max_iterations: int = 100
    rel_tol: float = 1e-10
    max_damping: float = 1e14
    polish_steps: int = 4
    polish_tol: float = 1e-12


@dataclass
class LMResult:
    x: Any
    cost: float
    initial_cost: float
    iterations: int
    status: str

    @property
    def ok(self) -> bool:
        return self.status in ("converged", "max_iterations", "zero_cost", "stalled")


def levenberg_marquardt(
    x0,
    cost: Callable[[Any], float],
    linearize: Callable[[Any], Any],
    solve: Callable[[Any, float], np.ndarray],
    retract: Callable[[Any, np.ndarray], Any],
    settings: LMSettings = LMSettings(),
) -> LMResult:
    x = x0
    c = float(cost(x))
    c0 = c
    if not np.isfinite(c):
        return LMResult(x, c, c0, 0, "nonfinite_start")
    mu = settings.initial_damping
    it = 0
    status = "max_iterations"
    while it < settings.max_iterations:
        if c == 0.0:
            status = "zero_cost"
            break
        system = linearize(x)
        it += 1
        accepted = False
        while mu <= settings.max_damping:
            step = solve(system, mu)
            if step is None or not np.all(np.isfinite(step)):
                mu *= settings.increase
                continue
            x_new = retract(x, step)
            c_new = float(cost(x_new))
            if np.isfinite(c_new) and c_new <= c:
                accepted = True
                break
            mu *= settings.increase
        if not accepted:
            status = "stalled"
            break
        decrease = c - c_new
        x, c = x_new, c_new
        mu = max(mu * settings.decrease, 1e-15)
        if decrease <= settings.rel_tol * max(c + decrease, 1e-300):
            status = "converged"
            break
    if status == "converged" and settings.polish_steps > 0:
        x, c, it = _polish(x, c, it, cost, linearize, solve, retract, settings)
    return LMResult(x, c, c0, it, status)


def _polish(x, c, it, cost, linearize, solve, retract, settings: LMSettings):
    """Undamped Gauss-Newton steps taken after cost-based convergence.

    Near a flat minimum the cost stops resolving parameter changes long
    before the gradient does, so steps are accepted while their length keeps
    shrinking quadratically and the cost stays within rounding of the converged value.
    """
    prev = np.inf
    ceiling = c * (1.0 + settings.polish_tol)
    for _ in range(settings.polish_steps):
        step = solve(linearize(x), 0.0)
        if step is None or not np.all(np.isfinite(step)):
            break
        norm = float(np.linalg.norm(step))
        if norm == 0.0 or norm > 0.5 * prev:
            break
        x_new = retract(x, step)
        c_new = float(cost(x_new))
        it += 1
        if not np.isfinite(c_new) or c_new > ceiling:
            break
        x, c, prev = x_new, c_new, norm
    return x, c, it


def dense_solver(system, mu: float):
    """Marquardt-damped Gauss-Newton step for a dense ``(r, J)`` pair.

    Solves the augmented least-squares problem instead of the normal
    equations, which keeps ill-conditioned polynomial fits accurate.
    """
    r, J = system
    scale = np.sum(J * J, axis=0)
    floor = max(float(scale.max(initial=0.0)) * 1e-12, 1e-300)
    scale = np.maximum(scale, floor)
    A = np.vstack([J, np.diag(np.sqrt(mu * scale))])
    b = np.concatenate([-r, np.zeros(J.shape[1])])
    step, *_ = np.linalg.lstsq(A, b, rcond=None)
    return step


def vector_retract(x, step):
    return x + step


def least_squares_lm(x0, residual_and_jacobian, settings: LMSettings = LMSettings(), residual=None):
    """Convenience wrapper for plain vector-space least squares."""
    if residual is None:
        def residual(x):
            return residual_and_jacobian(x)[0]

    def cost(x):
        r = residual(x)
        return float(r @ r) if np.all(np.isfinite(r)) else np.inf

    return levenberg_marquardt(
        np.asarray(x0, dtype=float), cost, residual_and_jacobian, dense_solver, vector_retract, settings
    )
