"""Derivative containers and the small protocol every model follows.

Shapes use ``n`` (state), ``m`` (action), ``nv = n + m`` and ``p`` (the
model's own parameter count). Mixed parameter blocks are always
``d/dtheta`` of a gradient, e.g. ``cx_theta[i, k] = d^2 c / dx_i dtheta_k``.
"""

from typing import NamedTuple, Optional

import numpy as np

from ..exceptions import DimensionMismatch, NonFiniteEvaluation


class StageDerivs(NamedTuple):
    c: float
    cx: np.ndarray  # (n,)
    cu: np.ndarray  # (m,)
    cxx: np.ndarray  # (n, n)
    cuu: np.ndarray  # (m, m)
    cxu: np.ndarray  # (n, m)
    cx_theta: np.ndarray  # (n, p)
    cu_theta: np.ndarray  # (m, p)


class TerminalDerivs(NamedTuple):
    c: float
    cx: np.ndarray
    cxx: np.ndarray
    cx_theta: np.ndarray


class DynDerivs(NamedTuple):
    f: np.ndarray  # (n,)
    fx: np.ndarray  # (n, n)
    fu: np.ndarray  # (n, m)
    fvv: Optional[np.ndarray]  # (n, nv, nv); None when f is affine in (x, u)
    f_theta: np.ndarray  # (n, p)
    fv_theta: Optional[np.ndarray]  # (n, nv, p); None when identically zero


def check_vec(v, size, name):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        v = v.reshape(-1)
    if v.size != size:
        raise DimensionMismatch(f"{name} has length {v.size}, expected {size}")
    return v


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluation(f"{what} produced non-finite values")
    return arr


class StageCost:
    """Base for stage costs ``c(x, u; theta_c)``."""

    n: int
    m: int
    n_params: int

    def value(self, theta, x, u):
        raise NotImplementedError

    def derivs(self, theta, x, u, with_theta=True):
        raise NotImplementedError

    def _check(self, theta, x, u):
        return (
            check_vec(theta, self.n_params, "theta_c"),
            check_vec(x, self.n, "x"),
            check_vec(u, self.m, "u"),
        )

    def to_config(self):
        raise NotImplementedError


class TerminalCost:
    """Base for terminal costs ``c_H(x; theta_H)``."""

    n: int
    n_params: int

    def value(self, theta, x):
        raise NotImplementedError

    def derivs(self, theta, x, with_theta=True):
        raise NotImplementedError

    def _check(self, theta, x):
        return check_vec(theta, self.n_params, "theta_H"), check_vec(x, self.n, "x")


class Dynamics:
    """Base for discrete dynamics ``x_next = f(x, u; theta_f)``."""

    n: int
    m: int
    n_params: int
    affine = False

    def step(self, theta, x, u):
        raise NotImplementedError

    def derivs(self, theta, x, u, with_theta=True):
        raise NotImplementedError

    def _check(self, theta, x, u):
        return (
            check_vec(theta, self.n_params, "theta_f"),
            check_vec(x, self.n, "x"),
            check_vec(u, self.m, "u"),
        )
