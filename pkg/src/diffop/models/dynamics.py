"""Parametric discrete-time dynamics models."""

import numpy as np

from .base import Dynamics, DynDerivs, check_finite
from .icnn import Icnn, IcnnLayout


class LinearEulerDynamics(Dynamics):
    """``x_next = x + dt * Theta' [x; u]`` with ``Theta`` of shape ``(n+m, n)``.

    ``theta_f`` is ``Theta`` flattened row-major, so entry ``r*n + k`` couples
    input coordinate ``r`` to state derivative ``k``.
    """

    affine = True

    def __init__(self, n, m, dt):
        self.n, self.m, self.dt = int(n), int(m), float(dt)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.n_params = (self.n + self.m) * self.n
        n, nv = self.n, self.n + self.m
        # d^2 f_k / d v_r d Theta[r', k'] = dt * delta(r, r') delta(k, k'), constant
        self._fv_theta = self.dt * np.einsum("kj,rs->krsj", np.eye(n), np.eye(nv)).reshape(n, nv, nv * n)
        self._fv_theta.setflags(write=False)

    def matrices(self, theta):
        """Return ``(A, B)`` with ``x_next = A x + B u``."""
        Th = np.asarray(theta, float).reshape(self.n + self.m, self.n)
        return np.eye(self.n) + self.dt * Th[: self.n].T, self.dt * Th[self.n :].T

    def params_from_matrices(self, A, B):
        """Inverse of :meth:`matrices` for the continuous-time part."""
        Ac = (np.asarray(A, float) - np.eye(self.n)) / self.dt
        Bc = np.asarray(B, float).reshape(self.n, self.m) / self.dt
        return np.vstack([Ac.T, Bc.T]).reshape(-1)

    def step(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        Th = theta.reshape(self.n + self.m, self.n)
        return check_finite(x + self.dt * (np.concatenate([x, u]) @ Th), "dynamics")

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n, m, dt = self.n, self.m, self.dt
        Th = theta.reshape(n + m, n)
        v = np.concatenate([x, u])
        f = check_finite(x + dt * (v @ Th), "dynamics")
        fx = np.eye(n) + dt * Th[:n].T
        fu = dt * Th[n:].T
        f_theta = fv_theta = None
        if with_theta:
            # d f_k / d Theta[r, k'] = dt * v_r * delta(k, k')
            f_theta = np.kron(dt * v, np.eye(n))
            fv_theta = self._fv_theta
        return DynDerivs(f, fx, fu, None, f_theta, fv_theta)

    def to_config(self):
        return {"kind": "linear_euler", "dt": self.dt}


class LinearDynamics(Dynamics):
    """``x_next = A x + B u`` with ``theta_f = [A (row-major), B (row-major)]``."""

    affine = True

    def __init__(self, n, m):
        self.n, self.m = int(n), int(m)
        self.n_params = self.n * self.n + self.n * self.m

    def _AB(self, theta):
        n, m = self.n, self.m
        return theta[: n * n].reshape(n, n), theta[n * n :].reshape(n, m)

    def step(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        A, B = self._AB(theta)
        return check_finite(A @ x + B @ u, "dynamics")

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n, m = self.n, self.m
        A, B = self._AB(theta)
        f = check_finite(A @ x + B @ u, "dynamics")
        f_theta = fv_theta = None
        if with_theta:
            I = np.eye(n)
            fA = np.einsum("ki,j->kij", I, x).reshape(n, n * n)
            fB = np.einsum("ki,j->kij", I, u).reshape(n, n * m)
            f_theta = np.hstack([fA, fB])
            fv_theta = np.zeros((n, n + m, self.n_params))
            for k in range(n):
                for j in range(n):
                    fv_theta[k, j, k * n + j] = 1.0
                for j in range(m):
                    fv_theta[k, n + j, n * n + k * m + j] = 1.0
        return DynDerivs(f, A.copy(), B.copy(), None, f_theta, fv_theta)

    def to_config(self):
        return {"kind": "linear"}


class IcnnResidualDynamics(Dynamics):
    """``x_next = x + dt * icnn([x; u])`` with an ``(n+m)-widths-n`` ICNN."""

    def __init__(self, n, m, dt, widths=(4,)):
        self.n, self.m, self.dt = int(n), int(m), float(dt)
        self.net = Icnn(IcnnLayout(self.n + self.m, tuple(widths), self.n))
        self.n_params = self.net.n_params

    def step(self, theta, x, u):
        theta, x, u = self._check(theta, x, u)
        return check_finite(x + self.dt * self.net.forward(theta, np.concatenate([x, u])), "dynamics")

    def derivs(self, theta, x, u, with_theta=True):
        theta, x, u = self._check(theta, x, u)
        n, dt = self.n, self.dt
        val, Gv, Hvv, Gt, Hvt = self.net.derivs(theta, np.concatenate([x, u]), with_theta)
        f = check_finite(x + dt * val, "dynamics")
        return DynDerivs(
            f, np.eye(n) + dt * Gv[:, :n], dt * Gv[:, n:], dt * Hvv,
            dt * Gt if with_theta else None, dt * Hvt if with_theta else None,
        )

    def to_config(self):
        return {"kind": "icnn_residual", "dt": self.dt, "widths": list(self.net.layout.widths)}


class FDDynamics(Dynamics):
    """Finite-difference derivatives of another model's ``step``.

    Shares the wrapped model's interface; intended for tests and for models
    without closed-form second derivatives.
    """

    def __init__(self, inner, h=1e-4):
        self.inner = inner
        self.n, self.m, self.n_params = inner.n, inner.m, inner.n_params
        self.h = h

    def step(self, theta, x, u):
        return self.inner.step(theta, x, u)

    def derivs(self, theta, x, u, with_theta=True):
        from ..numkit import fd_jacobian

        theta, x, u = self._check(theta, x, u)
        n, m, p = self.n, self.m, self.n_params
        v = np.concatenate([x, u])

        def jac_v(vv, th):
            return fd_jacobian(lambda w: self.inner.step(th, w[:n], w[n:]), vv, self.h)

        f = self.inner.step(theta, x, u)
        Jv = jac_v(v, theta)
        Hflat = fd_jacobian(lambda w: jac_v(w, theta).reshape(-1), v, self.h)
        fvv = Hflat.reshape(n, n + m, n + m)
        fvv = 0.5 * (fvv + fvv.transpose(0, 2, 1))
        f_theta = fv_theta = None
        if with_theta:
            f_theta = fd_jacobian(lambda th: self.inner.step(th, x, u), theta, self.h) if p else np.zeros((n, 0))
            if p:
                fv_theta = fd_jacobian(lambda th: jac_v(v, th).reshape(-1), theta, self.h).reshape(n, n + m, p)
            else:
                fv_theta = np.zeros((n, n + m, 0))
        return DynDerivs(f, Jv[:, :n], Jv[:, n:], fvv, f_theta, fv_theta)

