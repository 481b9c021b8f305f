"""Dense linear algebra and finite-difference helpers."""

import warnings

import numpy as np
import scipy.linalg
import scipy.special

from .exceptions import DimensionMismatch, NonFiniteEvaluation, SingularMatrix

PIVOT_RTOL = 1e-12


def as_vec(x, name="x"):
    v = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NonFiniteEvaluation(f"{name} has non-finite entries")
    return v


class LUSolver:
    """Pivoted LU factorization reused across several right-hand sides.

    Raises SingularMatrix when a pivot falls below ``PIVOT_RTOL`` times the
    largest absolute entry of the matrix.
    """

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise NonFiniteEvaluation("matrix has non-finite entries")
        self.n = A.shape[0]
        scale = np.max(np.abs(A)) if A.size else 0.0
        if scale == 0.0:
            raise SingularMatrix("zero matrix")
        with warnings.catch_warnings():
            # exact zero pivots are reported below as SingularMatrix
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            self.lu, self.piv = scipy.linalg.lu_factor(A, check_finite=False)
        pivots = np.abs(np.diag(self.lu))
        if np.min(pivots) < PIVOT_RTOL * scale:
            raise SingularMatrix(
                f"pivot {np.min(pivots):.3e} below {PIVOT_RTOL:g} x max entry {scale:.3e}"
            )

    def solve(self, b, trans=0):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"rhs has {b.shape[0]} rows, matrix is {self.n}x{self.n}")
        return scipy.linalg.lu_solve((self.lu, self.piv), b, trans=trans, check_finite=False)


def solve_linear(A, b):
    """Solve ``A x = b`` with partial pivoting; ``b`` may be a vector or a matrix."""
    return LUSolver(A).solve(b)


def default_steps(x, rel=1e-5):
    return rel * (1.0 + np.abs(x))


def fd_jacobian(f, x, h=None):
    """Central-difference Jacobian of a vector-valued ``f`` at ``x``.

    ``h`` may be a scalar or a per-coordinate array; by default
    ``h_j = 1e-5 * (1 + |x_j|)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    steps = default_steps(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += steps[j]
        xm[j] -= steps[j]
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float)).reshape(-1)
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float)).reshape(-1)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"non-finite probe along coordinate {j}")
        cols.append((fp - fm) / (2.0 * steps[j]))
    if not cols:
        out = np.atleast_1d(np.asarray(f(x), dtype=float)).reshape(-1)
        return np.zeros((out.size, 0))
    return np.column_stack(cols)


def fd_hessian(f, x, h=None):
    """Hessian of a scalar ``f`` as the symmetrized central Jacobian of a
    central-difference gradient."""
    x = np.asarray(x, dtype=float).reshape(-1)
    steps = default_steps(x, 1e-4) if h is None else h

    def grad(y):
        return fd_jacobian(lambda z: np.atleast_1d(f(z)), y, steps)[0]

    H = fd_jacobian(grad, x, steps)
    return 0.5 * (H + H.T)


def rel_err(a, b, floor=1e-12):
    """Normwise relative error ``max|a-b| / max(max|a|, max|b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return scipy.special.expit(x)

