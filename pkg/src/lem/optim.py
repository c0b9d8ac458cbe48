"""Unconstrained BFGS minimizer with a strong-Wolfe line search.

Written for smooth likelihood surfaces of modest dimension (<= ~25).  The
inverse-Hessian approximation is kept positive definite by skipping updates
whose curvature ``s.T @ y`` is not safely positive, and the first accepted
step rescales H to ``(s.T y)/(y.T y) * I`` (Shanno scaling) so poorly scaled
coordinates do not stall early iterations.

One optimizer invocation is stateless with respect to any other; instances
may run concurrently (one per simulation replicate).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import LineSearchFailure

WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
# Relative curvature threshold below which the BFGS update is skipped.
CURVATURE_GUARD = 1e-10


@dataclass
class OptimProblem:
    """Objective/gradient pair over R^dimension."""

    dimension: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]


@dataclass
class OptimResult:
    argmin: np.ndarray
    objective_value: float
    gradient_inf_norm: float
    iterations: int
    converged: bool
    n_evals: int = 0
    hess_inv: Optional[np.ndarray] = field(default=None, repr=False)


def _line_search(phi, dphi, f0, g0, max_widen=20, max_zoom=40):
    """Strong-Wolfe step along a descent direction.

    ``phi(a)`` returns the objective at step ``a`` (may be +inf past the
    domain of finiteness), ``dphi(a)`` its directional derivative.  Returns
    the accepted step.  Raises LineSearchFailure when no acceptable step is
    found within the iteration caps.
    """

    def zoom(lo, f_lo, d_lo, hi, f_hi):
        for _ in range(max_zoom):
            # quadratic interpolation on (lo, hi), safeguarded toward bisection
            denom = f_hi - f_lo - d_lo * (hi - lo)
            if denom > 0:
                a = lo - 0.5 * d_lo * (hi - lo) ** 2 / denom
            else:
                a = 0.5 * (lo + hi)
            span = abs(hi - lo)
            low, high = min(lo, hi), max(lo, hi)
            if not (low + 0.1 * span <= a <= high - 0.1 * span):
                a = 0.5 * (lo + hi)
            fa = phi(a)
            if not np.isfinite(fa) or fa > f0 + WOLFE_C1 * a * g0 or fa >= f_lo:
                hi, f_hi = a, fa
            else:
                da = dphi(a)
                if abs(da) <= -WOLFE_C2 * g0:
                    return a, fa
                if da * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, d_lo = a, fa, da
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchFailure("zoom phase exhausted without a Wolfe point")

    a_prev, f_prev, d_prev = 0.0, f0, g0
    a = 1.0
    for it in range(max_widen):
        fa = phi(a)
        if not np.isfinite(fa) or fa > f0 + WOLFE_C1 * a * g0 or (it > 0 and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, fa)
        da = dphi(a)
        if abs(da) <= -WOLFE_C2 * g0:
            return a, fa
        if da >= 0:
            return zoom(a, fa, da, a_prev, f_prev)
        a_prev, f_prev, d_prev = a, fa, da
        a *= 2.0
    raise LineSearchFailure("step widening exhausted without a Wolfe point")


def minimize_bfgs(problem, start, tol=1e-8, max_iter=500, callback=None):
    """Minimize an OptimProblem from ``start``.

    Convergence is declared when the gradient infinity norm drops to ``tol``.
    Hitting ``max_iter`` returns the best point with ``converged=False``.  A
    failed line search raises :class:`LineSearchFailure` with the best point
    so far attached as ``exc.result``.

    ``callback``, if given, is invoked after each accepted step with a dict
    holding ``k, x, f, f_prev, alpha, dphi0, gnorm`` (used by tests to assert
    the Armijo decrease condition on every accepted step).
    """
    x = np.asarray(start, dtype=float).copy()
    if x.shape != (problem.dimension,):
        raise ValueError(f"start has shape {x.shape}, problem dimension is {problem.dimension}")
    if tol <= 0:
        raise ValueError("tol must be positive")

    evals = 0

    def func(v):
        nonlocal evals
        evals += 1
        return float(problem.objective(v))

    f = func(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    g = np.asarray(problem.gradient(x), dtype=float)
    n = problem.dimension
    ident = np.eye(n)
    h_inv = ident.copy()
    first_step = True

    for k in range(max_iter):
        gnorm = float(np.abs(g).max())
        if gnorm <= tol:
            return OptimResult(x, f, gnorm, k, True, evals, h_inv)

        p = -h_inv @ g
        dphi0 = float(g @ p)
        if dphi0 >= 0:
            # H drifted away from positive definiteness; restart from identity
            h_inv = ident.copy()
            p = -g
            dphi0 = float(g @ p)

        g_trial = {}

        def phi(a):
            return func(x + a * p)

        def dphi(a):
            ga = np.asarray(problem.gradient(x + a * p), dtype=float)
            g_trial[a] = ga
            return float(ga @ p)

        try:
            alpha, f_new = _line_search(phi, dphi, f, dphi0)
        except LineSearchFailure as exc:
            exc.result = OptimResult(x, f, gnorm, k, gnorm <= tol, evals, h_inv)
            raise

        s = alpha * p
        x_new = x + s
        g_new = g_trial.get(alpha)
        if g_new is None:
            g_new = np.asarray(problem.gradient(x_new), dtype=float)
        yv = g_new - g

        sy = float(s @ yv)
        if first_step and sy > 0:
            h_inv = (sy / float(yv @ yv)) * ident
            first_step = False
        if sy > CURVATURE_GUARD * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            left = ident - rho * np.outer(s, yv)
            h_inv = left @ h_inv @ left.T + rho * np.outer(s, s)

        if callback is not None:
            callback({"k": k, "x": x_new.copy(), "f": f_new, "f_prev": f, "alpha": alpha,
                      "dphi0": dphi0, "gnorm": float(np.abs(g_new).max())})

        x, f, g = x_new, f_new, g_new

    gnorm = float(np.abs(g).max())
    return OptimResult(x, f, gnorm, max_iter, gnorm <= tol, evals, h_inv)
