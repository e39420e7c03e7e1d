"""Damped Gauss-Newton (Levenberg-Marquardt) least squares with box bounds.

Small and self-contained so the fit layer can guarantee monotone descent
over accepted steps and expose the full cost history.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    cost_history: list[float]
    n_iterations: int
    status: str            # converged_step | converged_cost | max_iterations | stalled
    converged: bool
    covariance: np.ndarray | None
    residual: np.ndarray


def _clip(x: np.ndarray, bounds: tuple[np.ndarray, np.ndarray] | None) -> np.ndarray:
    if bounds is None:
        return x
    return np.clip(x, bounds[0], bounds[1])


def least_squares_lm(residual_fn: Callable[[np.ndarray], np.ndarray],
                     jacobian_fn: Callable[[np.ndarray], np.ndarray],
                     x0: np.ndarray,
                     bounds: tuple[np.ndarray, np.ndarray] | None = None,
                     max_iterations: int = 200,
                     step_tol: float = 1e-8,
                     cost_tol: float = 1e-10,
                     lam0: float = 1e-3) -> LMResult:
    """Minimize 0.5 ||r(x)||^2 with adaptive diagonal damping.

    The damping multiplies diag(J^T J) (Fletcher scaling), which makes the
    iteration invariant to per-parameter rescaling.  A trial step is only
    accepted if it lowers the cost, so the cost history is monotone.
    Convergence: relative step below ``step_tol`` or relative cost
    decrease below ``cost_tol``.
    """

    x = _clip(np.asarray(x0, dtype=float).copy(), bounds)
    r = np.asarray(residual_fn(x), dtype=float)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = lam0
    status = "max_iterations"
    n_iter = 0

    for n_iter in range(1, max_iterations + 1):
        jac = np.asarray(jacobian_fn(x), dtype=float)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0.0] = 1.0

        accepted = False
        while lam < 1e14:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = _clip(x + step, bounds)
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            status = "stalled" if history[-1] < history[0] else "max_iterations"
            break

        step_size = np.linalg.norm(x_new - x)
        rel_step = step_size / max(np.linalg.norm(x), 1e-300)
        rel_drop = (cost - cost_new) / max(cost, 1e-300)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if rel_step < step_tol:
            status = "converged_step"
            break
        if rel_drop < cost_tol:
            status = "converged_cost"
            break

    converged = status in ("converged_step", "converged_cost")
    covariance = None
    try:
        jac = np.asarray(jacobian_fn(x), dtype=float)
        jtj = jac.T @ jac
        dof = max(len(r) - len(x), 1)
        covariance = np.linalg.inv(jtj) * (2.0 * cost / dof)
    except np.linalg.LinAlgError:
        covariance = None
    return LMResult(x, cost, history, n_iter, status, converged, covariance, r)


def finite_difference_jacobian(residual_fn: Callable[[np.ndarray], np.ndarray],
                               x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian for verifying analytic derivatives."""

    x = np.asarray(x, dtype=float)
    r0 = np.asarray(residual_fn(x))
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1e-30)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(residual_fn(xp)) - np.asarray(residual_fn(xm))) / (2.0 * h)
    return jac
