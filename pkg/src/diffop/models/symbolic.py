"""Parameter-free models whose derivatives come from sympy.

Used for ground-truth environment models: the right-hand side is written
once against a math namespace (``numpy`` or ``sympy``) and differentiated
symbolically here, so the planner can run on the true system.
"""

import numpy as np
import sympy

from .base import Dynamics, DynDerivs, StageCost, StageDerivs, TerminalCost, TerminalDerivs, check_finite


def _symbols(n, m):
    xs = sympy.symbols(f"x0:{n}", real=True)
    us = sympy.symbols(f"u0:{m}", real=True) if m else ()
    return list(xs), list(us)


def _lambdify(args, expr):
    return sympy.lambdify(args, expr, modules="numpy", cse=True)


class SymbolicDynamics(Dynamics):
    """Euler-discretized ``x_next = x + dt * rhs(x, u)`` for a symbolic ``rhs``.

    ``rhs(x, u, lib)`` must return a list of ``n`` expressions built with
    ``lib.sin``/``lib.cos``/``lib.sqrt`` and arithmetic only. An optional
    ``post(x_next, lib)`` maps the Euler update to the final state (used
    for quaternion renormalization).
    """

    n_params = 0

    def __init__(self, rhs, n, m, dt, name="analytic", post=None):
        self.n, self.m, self.dt, self.name = int(n), int(m), float(dt), name
        xs, us = _symbols(self.n, self.m)
        v = xs + us
        nxt = [xi + self.dt * ri for xi, ri in zip(xs, rhs(xs, us, sympy))]
        if post is not None:
            nxt = post(nxt, sympy)
        f = sympy.Matrix(nxt)
        J = f.jacobian(v)
        H = [sympy.hessian(f[k], v) for k in range(self.n)]
        self._f = _lambdify(v, list(f))
        self._J = _lambdify(v, J.tolist())
        self._H = _lambdify(v, [h.tolist() for h in H])
        self.affine = all(h.is_zero_matrix for h in H)

    def step(self, theta, x, u):
        _, x, u = self._check(theta, x, u)
        return check_finite(np.asarray(self._f(*x, *u), dtype=float), "dynamics")

    def derivs(self, theta, x, u, with_theta=True):
        _, x, u = self._check(theta, x, u)
        n, m = self.n, self.m
        args = (*x, *u)
        f = check_finite(np.asarray(self._f(*args), dtype=float), "dynamics")
        J = np.asarray(self._J(*args), dtype=float).reshape(n, n + m)
        fvv = None if self.affine else np.asarray(self._H(*args), dtype=float).reshape(n, n + m, n + m)
        return DynDerivs(
            f, J[:, :n], J[:, n:], fvv,
            np.zeros((n, 0)) if with_theta else None,
            None,
        )

    def to_config(self):
        return {"kind": "analytic", "name": self.name, "dt": self.dt}


class SymbolicCost(StageCost):
    """Parameter-free stage cost from ``expr(x, u, lib) -> scalar expression``."""

    n_params = 0

    def __init__(self, expr, n, m, name="analytic"):
        self.n, self.m, self.name = int(n), int(m), name
        xs, us = _symbols(self.n, self.m)
        v = xs + us
        c = sympy.sympify(expr(xs, us, sympy))
        g = [sympy.diff(c, vi) for vi in v]
        H = sympy.hessian(c, v)
        self._c = _lambdify(v, c)
        self._g = _lambdify(v, g)
        self._H = _lambdify(v, H.tolist())

    def value(self, theta, x, u):
        _, x, u = self._check(theta, x, u)
        return float(self._c(*x, *u))

    def derivs(self, theta, x, u, with_theta=True):
        _, x, u = self._check(theta, x, u)
        n, m = self.n, self.m
        args = (*x, *u)
        g = np.asarray(self._g(*args), dtype=float).reshape(n + m)
        H = np.asarray(self._H(*args), dtype=float).reshape(n + m, n + m)
        z = (np.zeros((n, 0)), np.zeros((m, 0))) if with_theta else (None, None)
        return StageDerivs(float(self._c(*args)), g[:n], g[n:], H[:n, :n], H[n:, n:], H[:n, n:], *z)

    def to_config(self):
        return {"kind": "analytic", "name": self.name}


class SymbolicTerminalCost(TerminalCost):
    n_params = 0

    def __init__(self, expr, n, name="analytic"):
        self.n, self.name = int(n), name
        xs, _ = _symbols(self.n, 0)
        c = sympy.sympify(expr(xs, sympy))
        self._c = _lambdify(xs, c)
        self._g = _lambdify(xs, [sympy.diff(c, xi) for xi in xs])
        self._H = _lambdify(xs, sympy.hessian(c, xs).tolist())

    def value(self, theta, x):
        _, x = self._check(theta, x)
        return float(self._c(*x))

    def derivs(self, theta, x, with_theta=True):
        _, x = self._check(theta, x)
        n = self.n
        return TerminalDerivs(
            float(self._c(*x)),
            np.asarray(self._g(*x), dtype=float).reshape(n),
            np.asarray(self._H(*x), dtype=float).reshape(n, n),
            np.zeros((n, 0)) if with_theta else None,
        )

    def to_config(self):
        return {"kind": "analytic", "name": self.name}
