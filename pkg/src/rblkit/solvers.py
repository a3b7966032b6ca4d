"""Gauss-Newton nonlinear least squares with backtracking line search.

Shared by all estimators. The objective is ``f(x) = sum(r(x)**2)``;
steps solve the linearized problem ``min ||J p + r||`` via least squares
and are accepted only if they satisfy an Armijo decrease, so the
objective never increases between accepted iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GaussNewtonResult", "gauss_newton"]


@dataclass
class GaussNewtonResult:
    x: np.ndarray
    objective: float
    grad_norm: float
    last_step: float
    iterations: int
    converged: bool
    message: str
    objective_trace: list = field(default_factory=list)


def gauss_newton(
    residual_fn,
    jacobian_fn,
    x0: np.ndarray,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
    max_iter: int = 200,
    armijo_c: float = 1e-4,
    backtrack: float = 0.5,
    min_alpha: float = 1e-16,
) -> GaussNewtonResult:
    """Minimize ``sum(residual_fn(x)**2)`` by damped Gauss-Newton.

    Args:
        residual_fn: Maps ``(n,)`` parameters to an ``(m,)`` residual vector.
        jacobian_fn: Maps parameters to the ``(m, n)`` residual Jacobian.
        x0: Starting point.
        grad_tol: Converged when ``||2 J^T r|| < grad_tol``.
        step_tol: Converged when the accepted step norm falls below this.
        max_iter: Iteration cap.
        armijo_c: Sufficient-decrease constant for the line search.
        backtrack: Step-length shrink factor.
        min_alpha: Line-search floor; stalling below it means divergence.

    Returns:
        :class:`GaussNewtonResult`; ``converged`` is False on divergence
        or when the iteration cap is hit.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual_fn(x)
    f = float(r @ r)
    trace = [f]

    grad_norm = np.inf
    last_step = np.inf
    converged = False
    message = "max iterations reached"
    iterations = 0

    for iterations in range(max_iter + 1):
        jac = jacobian_fn(x)
        grad = 2.0 * jac.T @ r
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < grad_tol:
            converged = True
            message = "gradient tolerance reached"
            break
        if iterations == max_iter:
            break

        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        if not np.all(np.isfinite(step)):
            message = "non-finite Gauss-Newton step"
            break
        # Fall back to steepest descent if the linearized step is not a
        # descent direction (rank-deficient Jacobian).
        if grad @ step >= 0.0:
            step = -grad

        alpha = 1.0
        accepted = False
        directional = float(grad @ step)
        while alpha >= min_alpha:
            x_new = x + alpha * step
            r_new = residual_fn(x_new)
            f_new = float(r_new @ r_new)
            if f_new <= f + armijo_c * alpha * directional:
                accepted = True
                break
            alpha *= backtrack
        if not accepted:
            message = "line search stalled"
            break

        last_step = float(np.linalg.norm(alpha * step))
        x, r, f = x_new, r_new, f_new
        trace.append(f)
        if last_step < step_tol:
            converged = True
            message = "step tolerance reached"
            iterations += 1
            break

    return GaussNewtonResult(
        x=x,
        objective=f,
        grad_norm=grad_norm,
        last_step=last_step,
        iterations=iterations,
        converged=converged,
        message=message,
        objective_trace=trace,
    )
