"""Numerically stable normal special functions and small dense linear algebra.

All matrices in this package are tiny (never beyond the parameter dimension,
~25), so plain dense O(n^3) routines are used throughout.  "Symmetric matrix"
arguments are ordinary ndarrays validated by :func:`as_sym_matrix`; there is
no wrapper class.

Functions here are pure and reentrant; NaN screening happens at the data
validation boundary, not in these kernels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import NotPositiveDefinite, SingularMatrix

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)

# Below this point the erfc kernel is abandoned for the asymptotic tail
# expansion; keeps log Phi finite (no underflow) down to x = -300 and beyond.
TAIL_CROSSOVER = -10.0


def std_normal_pdf(x):
    """Standard normal density, (2*pi)^(-1/2) * exp(-x^2 / 2)."""
    xa = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * xa * xa - LOG_SQRT_2PI)
    return out if isinstance(x, np.ndarray) else float(out)


def std_normal_log_pdf(x):
    """log of the standard normal density."""
    xa = np.asarray(x, dtype=float)
    out = -0.5 * xa * xa - LOG_SQRT_2PI
    return out if isinstance(x, np.ndarray) else float(out)


def std_normal_cdf(x):
    """Standard normal CDF via the complementary error function kernel."""
    xa = np.asarray(x, dtype=float)
    out = 0.5 * special.erfc(-xa / _SQRT2)
    return out if isinstance(x, np.ndarray) else float(out)


def log_std_normal_cdf(x):
    """log Phi(x) without underflow for arbitrarily negative x.

    Three regimes:

    * x < -10: four-term Mills-ratio asymptotic expansion,
      ``-x^2/2 - log(-x) - log(2*pi)/2 + log(1 - x^-2 + 3x^-4 - 15x^-6)``;
    * -10 <= x <= 0: ``log(erfc(-x/sqrt(2)) / 2)``;
    * x > 0: ``log1p(-erfc(x/sqrt(2)) / 2)`` so the result approaches 0 from
      below at full precision instead of rounding to exactly 0.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xa)

    lo = xa < TAIL_CROSSOVER
    hi = xa > 0.0
    mid = ~(lo | hi)
    if lo.any():
        v = xa[lo]
        inv2 = 1.0 / (v * v)
        series = 1.0 - inv2 * (1.0 - inv2 * (3.0 - 15.0 * inv2))
        out[lo] = -0.5 * v * v - np.log(-v) - LOG_SQRT_2PI + np.log(series)
    if mid.any():
        out[mid] = np.log(0.5 * special.erfc(-xa[mid] / _SQRT2))
    if hi.any():
        out[hi] = np.log1p(-0.5 * special.erfc(xa[hi] / _SQRT2))

    if isinstance(x, np.ndarray):
        return out.reshape(np.shape(x))
    return float(out[0])


def as_sym_matrix(m, tol=1e-12):
    """Validate a dense symmetric matrix and return its symmetrized copy.

    Raises ValueError when ``m`` is not square, empty, or departs from
    symmetry by more than ``tol`` relative to its largest entry.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a square matrix of dimension >= 1, got shape {a.shape}")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def cholesky(m):
    """Lower-triangular L with L @ L.T == m.

    Raises NotPositiveDefinite when a pivot is nonpositive, which for
    simulation configs signals an invalid correlation structure.
    """
    a = as_sym_matrix(m)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix of dimension {a.shape[0]} is not positive definite") from exc


def solve_sym(m, rhs):
    """Solve m @ x = rhs for symmetric invertible m.

    Raises SingularMatrix when the factorization fails or the residual check
    ``||m @ x - rhs|| <= 1e-8 * ||rhs||`` does not hold (collinear design or
    non-identified fit).
    """
    a = as_sym_matrix(m)
    b = np.asarray(rhs, dtype=float)
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("symmetric solve failed: matrix is singular") from exc
    norm_b = np.linalg.norm(b)
    if norm_b > 0:
        resid = np.linalg.norm(a @ x - b) / norm_b
        if not np.isfinite(resid) or resid > 1e-8:
            raise SingularMatrix(f"symmetric solve residual {resid:.3e} exceeds 1e-8; matrix is numerically singular")
    return x
