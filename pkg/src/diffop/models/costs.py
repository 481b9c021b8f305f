"""Parametric stage and terminal costs."""

import numpy as np

from ..exceptions import DimensionMismatch
from .base import StageCost, StageDerivs, TerminalCost, TerminalDerivs, check_finite
from .icnn import Icnn, IcnnLayout

R_MIN = 1e-3


def _goal(x_goal, n):
    g = np.zeros(n) if x_goal is None else np.asarray(x_goal, dtype=float).reshape(-1)
    if g.size != n:
        raise DimensionMismatch(f"x_goal has length {g.size}, expected {n}")
    return g


class QuadraticCost(StageCost):
    """``c = ||q * (x - x_goal)||^2 + u' R u`` with ``R = r_min I + L L'``.

    Parameters are ``[q (n), L (m*m, row-major)]``. Any ``L`` gives
    ``R >= r_min I``, so the cost is strongly convex in ``u``.
    """

    def __init__(self, n, m, x_goal=None, r_min=R_MIN):
        self.n, self.m = int(n), int(m)
        self.x_goal = _goal(x_goal, self.n)
        self.r_min = float(r_min)
        self.n_params = self.n + self.m * self.m

    def _split(self, theta):
        q = theta[: self.n]
        L = theta[self.n :].reshape(self.m, self.m)
        return q, L, self.r_min * np.eye(self.m) + L @ L.T

    def params_from_weights(self, q, R):
        """Parameters reproducing weights ``q`` and ``R`` (``R - r_min I`` must be PD)."""
        q = np.asarray(q, dtype=float).reshape(self.n)
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape == (1, 1) and self.m > 1:
            R = R[0, 0] * np.eye(self.m)
        L = np.linalg.cholesky(R - self.r_min * np.eye(self.m))
        return np.concatenate([q, L.reshape(-1)])

    def weights(self, theta):
        q, _, R = self._split(np.asarray(theta, float))
        return q, R

    def value(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        q, _, R = self._split(theta)
        r = q * (x - self.x_goal)
        return float(r @ r + u @ R @ u)

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n, m = self.n, self.m
        q, L, R = self._split(theta)
        dx = x - self.x_goal
        q2 = q * q
        c = float((q2 * dx) @ dx + u @ R @ u)
        cx = 2.0 * q2 * dx
        cu = 2.0 * R @ u
        cxx = np.diag(2.0 * q2)
        cuu = 2.0 * R
        cxu = np.zeros((n, m))
        if with_theta:
            cx_theta = np.zeros((n, self.n_params))
            cx_theta[np.arange(n), np.arange(n)] = 4.0 * q * dx
            # d/dL_ab of 2 (L L' u)_i = 2 (delta_ia (L'u)_b + L_ib u_a)
            Ltu = L.T @ u
            T = np.zeros((m, m, m))
            T[np.arange(m), np.arange(m), :] = Ltu[None, :]
            T += L[:, None, :] * u[None, :, None]
            cu_theta = np.zeros((m, self.n_params))
            cu_theta[:, n:] = 2.0 * T.reshape(m, m * m)
        else:
            cx_theta = cu_theta = None
        return StageDerivs(c, cx, cu, cxx, cuu, cxu, cx_theta, cu_theta)

    def to_config(self):
        return {"kind": "quadratic", "x_goal": self.x_goal.tolist(), "r_min": self.r_min}


class DiagonalQuadraticCost(StageCost):
    """``c = sum_k w_x[k] x_k^2 + sum_j w_u[j] u_j^2`` with the weights as parameters.

    Parameters enter linearly, as in scalar LQR textbook examples; positivity
    of ``w_u`` is the caller's responsibility.
    """

    def __init__(self, n, m):
        self.n, self.m = int(n), int(m)
        self.n_params = self.n + self.m

    def value(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        return float(theta[: self.n] @ (x * x) + theta[self.n :] @ (u * u))

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n, m = self.n, self.m
        wx, wu = theta[:n], theta[n:]
        c = float(wx @ (x * x) + wu @ (u * u))
        cx_theta = cu_theta = None
        if with_theta:
            cx_theta = np.zeros((n, n + m))
            cx_theta[np.arange(n), np.arange(n)] = 2.0 * x
            cu_theta = np.zeros((m, n + m))
            cu_theta[np.arange(m), n + np.arange(m)] = 2.0 * u
        return StageDerivs(
            c, 2 * wx * x, 2 * wu * u, np.diag(2 * wx), np.diag(2 * wu), np.zeros((n, m)),
            cx_theta, cu_theta,
        )

    def to_config(self):
        return {"kind": "diagonal"}


class IcnnCost(StageCost):
    """Scalar ICNN of ``(x - x_goal, u)`` plus ``r_min ||u||^2`` for strong convexity in u."""

    def __init__(self, n, m, widths=(4,), x_goal=None, r_min=R_MIN):
        self.n, self.m = int(n), int(m)
        self.x_goal = _goal(x_goal, self.n)
        self.r_min = float(r_min)
        self.net = Icnn(IcnnLayout(self.n + self.m, tuple(widths), 1))
        self.n_params = self.net.n_params

    def value(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        y = self.net.forward(theta, np.concatenate([x - self.x_goal, u]))
        return float(y[0] + self.r_min * u @ u)

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n = self.n
        val, Gv, Hvv, Gt, Hvt = self.net.derivs(theta, np.concatenate([x - self.x_goal, u]), with_theta)
        g, H = Gv[0], Hvv[0]
        cuu = H[n:, n:] + 2.0 * self.r_min * np.eye(self.m)
        out = StageDerivs(
            float(val[0] + self.r_min * u @ u),
            g[:n], g[n:] + 2.0 * self.r_min * u,
            H[:n, :n], cuu, H[:n, n:],
            Hvt[0][:n] if with_theta else None,
            Hvt[0][n:] if with_theta else None,
        )
        check_finite(out.cx, "ICNN cost")
        return out

    def to_config(self):
        return {"kind": "icnn", "widths": list(self.net.layout.widths),
                "x_goal": self.x_goal.tolist(), "r_min": self.r_min}


class QuadraticTerminalCost(TerminalCost):
    """``c_H = ||q_H * (x - x_goal)||^2`` with parameters ``q_H``."""

    def __init__(self, n, x_goal=None):
        self.n = int(n)
        self.x_goal = _goal(x_goal, self.n)
        self.n_params = self.n

    def value(self, theta, x):
        theta, x = self._check(theta, x)
        r = theta * (x - self.x_goal)
        return float(r @ r)

    def derivs(self, theta, x, with_theta=True):
        theta, x = self._check(theta, x)
        dx = x - self.x_goal
        q2 = theta * theta
        cx_theta = np.diag(4.0 * theta * dx) if with_theta else None
        return TerminalDerivs(float(q2 @ (dx * dx)), 2 * q2 * dx, np.diag(2 * q2), cx_theta)

    def to_config(self):
        return {"kind": "quadratic", "x_goal": self.x_goal.tolist()}


class ZeroTerminalCost(TerminalCost):
    n_params = 0

    def __init__(self, n):
        self.n = int(n)

    def value(self, theta, x):
        self._check(theta, x)
        return 0.0

    def derivs(self, theta, x, with_theta=True):
        self._check(theta, x)
        n = self.n
        return TerminalDerivs(0.0, np.zeros(n), np.zeros((n, n)), np.zeros((n, 0)) if with_theta else None)

    def to_config(self):
        return {"kind": "zero"}
