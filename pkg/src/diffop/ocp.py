"""H-step optimization-based policy: unrolled cost, derivatives and solver.

The planning problem is::

    min_u  sum_{i=0}^{H-1} c(x_i, u_i; theta_c) + c_H(x_H; theta_H)
    s.t.   x_0 = x_init,  x_{i+1} = f(x_i, u_i; theta_f),  g(x_i, u_i) <= 0

Decision vectors are flattened as ``zeta = (x_0, u_0, x_1, u_1, ..., x_H)``.
The stacked equality/active-inequality vector ``z`` is ordered: initial
state pin, then for each step the active inequalities followed by the
dynamics defect ``x_{i+1} - f(x_i, u_i)``, then terminal active
inequalities. Multipliers follow the convention ``lambda' A = grad_zeta J``
for the Lagrangian ``J - lambda' z``, so an active ``g <= 0`` row carries a
nonpositive ``lambda``; :attr:`PlanSolution.ineq_multipliers` reports the
conventional nonnegative values.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .exceptions import ConfigError, DimensionMismatch, NonFiniteEvaluation

logger = logging.getLogger(__name__)

ACTIVE_TOL = 1e-8


@dataclass(frozen=True)
class ZetaLayout:
    n: int
    m: int
    H: int

    @property
    def dim(self):
        return (self.H + 1) * self.n + self.H * self.m

    def x(self, i):
        s = i * (self.n + self.m)
        return slice(s, s + self.n)

    def u(self, i):
        s = i * (self.n + self.m) + self.n
        return slice(s, s + self.m)

    def v(self, i):
        s = i * (self.n + self.m)
        return slice(s, s + self.n + self.m)

    def pack(self, states, actions):
        z = np.empty(self.dim)
        for i in range(self.H):
            z[self.x(i)] = states[i]
            z[self.u(i)] = actions[i]
        z[self.x(self.H)] = states[self.H]
        return z


class Ineq(NamedTuple):
    step: int  # planning step; H for terminal constraints
    kind: str  # "lower" | "upper" | "g" | "g_terminal"
    index: int  # action coordinate for bounds, component for g


@dataclass
class ConstraintSpec:
    """Known constraints of the planning problem.

    Box bounds on actions may be given per coordinate ``(m,)`` or per step
    ``(H, m)``; use ``+-inf`` for absent sides. ``g(x, u)`` returns
    ``n_g`` values constrained to be ``<= 0``; ``g_jac`` returns their
    ``(n_g, n+m)`` Jacobian and ``g_hess`` (optional, zero if omitted) the
    ``(n_g, n+m, n+m)`` Hessians. ``g_terminal`` and friends act on ``x_H``.
    """

    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None
    g: Optional[Callable] = None
    g_jac: Optional[Callable] = None
    g_hess: Optional[Callable] = None
    n_g: int = 0
    g_terminal: Optional[Callable] = None
    g_terminal_jac: Optional[Callable] = None
    g_terminal_hess: Optional[Callable] = None
    n_g_terminal: int = 0

    def __post_init__(self):
        if (self.g is None) != (self.g_jac is None):
            raise ConfigError("g and g_jac must be given together")
        if (self.g_terminal is None) != (self.g_terminal_jac is None):
            raise ConfigError("g_terminal and g_terminal_jac must be given together")
        if self.g is not None and self.n_g < 1:
            raise ConfigError("n_g must be set when g is given")
        if self.g_terminal is not None and self.n_g_terminal < 1:
            raise ConfigError("n_g_terminal must be set when g_terminal is given")

    @property
    def has_general(self):
        return self.g is not None or self.g_terminal is not None

    def bounds(self, H, m):
        lo = np.full((H, m), -np.inf)
        hi = np.full((H, m), np.inf)
        if self.u_lower is not None:
            lo[:] = np.broadcast_to(np.asarray(self.u_lower, float), (H, m))
        if self.u_upper is not None:
            hi[:] = np.broadcast_to(np.asarray(self.u_upper, float), (H, m))
        if np.any(lo > hi):
            raise ConfigError("box bounds require lower <= upper")
        return lo, hi

    def enumerate(self, H, m):
        """Every inequality in the canonical order used for active-set indices."""
        lo, hi = self.bounds(H, m)
        out = []
        for i in range(H):
            out += [Ineq(i, "lower", j) for j in range(m) if np.isfinite(lo[i, j])]
            out += [Ineq(i, "upper", j) for j in range(m) if np.isfinite(hi[i, j])]
            if self.g is not None:
                out += [Ineq(i, "g", k) for k in range(self.n_g)]
        if self.g_terminal is not None:
            out += [Ineq(H, "g_terminal", k) for k in range(self.n_g_terminal)]
        return out


NO_CONSTRAINTS = ConstraintSpec()


@dataclass
class SolverCfg:
    grad_tol: float = 1e-10
    max_iters: int = 200
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    warm_start: Optional[np.ndarray] = None
    active_tol: float = ACTIVE_TOL
    al_rho0: float = 10.0
    al_rho_max: float = 1e10
    al_max_outer: int = 60

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ConfigError("grad_tol must be positive")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")


@dataclass
class PlanSolution:
    """Plan, active set and diagnostics.

    Multipliers, their row labels, the KKT residual and the weakly-active
    list are recovered on first access (one least-squares solve), so
    callers that only need the plan do not pay for them.
    """

    states: np.ndarray  # (H+1, n)
    actions: np.ndarray  # (H, m)
    active_set: List[int]
    iterations: int
    converged: bool
    x_init: np.ndarray
    objective: float = float("nan")
    grad_norm: float = float("nan")
    nonconvex_detected: bool = False
    message: str = ""
    _context: tuple = field(default=None, repr=False, compare=False)
    _diag: dict = field(default=None, repr=False, compare=False)

    def _diagnostics(self):
        if self._diag is None:
            if self._context is None:
                raise ValueError("plan has no model context for diagnostics")
            model, theta, cons = self._context
            self._diag = _plan_diagnostics(model, theta, self, cons)
        return self._diag

    @property
    def multipliers(self):
        """``lambda`` over the stacked constraints ``z`` (shape ``(n_z,)``)."""
        return self._diagnostics()["multipliers"]

    @multipliers.setter
    def multipliers(self, value):
        d = dict(self._diagnostics())
        d["multipliers"] = np.asarray(value, dtype=float)
        self._diag = d

    @property
    def z_rows(self):
        return self._diagnostics()["z_rows"]

    @property
    def kkt_residual(self):
        return self._diagnostics()["kkt_residual"]

    @property
    def weakly_active(self):
        return self._diagnostics()["weakly_active"]

    @property
    def u_seq(self):
        return self.actions.reshape(-1)

    @property
    def u0(self):
        return self.actions[0].copy()

    @property
    def ineq_multipliers(self):
        """Nonnegative KKT multipliers of the active inequalities, in active-set order."""
        rows = [k for k, r in enumerate(self.z_rows) if r[0] == "ineq"]
        return -self.multipliers[rows]


class UnrolledDerivs(NamedTuple):
    J: float
    grad: Optional[np.ndarray]  # (mH,)
    hess: Optional[np.ndarray]  # (mH, mH)
    cross: Optional[np.ndarray]  # (mH, d) = d/dtheta of grad
    states: np.ndarray  # (H+1, n)
    adjoint: Optional[np.ndarray]  # (H+1, n), multipliers of pin and dynamics rows


def _as_actions(model, u_seq):
    U = np.asarray(u_seq, dtype=float)
    if U.size != model.H * model.m:
        raise DimensionMismatch(f"u_seq has {U.size} entries, expected m*H = {model.H * model.m}")
    return U.reshape(model.H, model.m)


def rollout_states(model, theta, x_init, u_seq):
    """States predicted by the planning model for an action sequence."""
    th_c, th_H, th_f = model.split(theta)
    U = _as_actions(model, u_seq)
    xs = np.empty((model.H + 1, model.n))
    xs[0] = np.asarray(x_init, dtype=float).reshape(model.n)
    for i in range(model.H):
        xs[i + 1] = model.dynamics.step(th_f, xs[i], U[i])
    return xs


def unrolled_cost(model, theta, x_init, u_seq, penalty=None):
    """Planning objective with the dynamics substituted."""
    th_c, th_H, th_f = model.split(theta)
    U = _as_actions(model, u_seq)
    x = np.asarray(x_init, dtype=float).reshape(model.n)
    J = 0.0
    for i in range(model.H):
        J += model.stage.value(th_c, x, U[i])
        if penalty is not None:
            J += penalty.stage_value(i, x, U[i])
        x = model.dynamics.step(th_f, x, U[i])
    J += model.terminal.value(th_H, x)
    if penalty is not None:
        J += penalty.terminal_value(x)
    if not np.isfinite(J):
        raise NonFiniteEvaluation("unrolled cost is not finite")
    return float(J)


def unrolled_derivs(model, theta, x_init, u_seq, order=2, with_theta=True, penalty=None):
    """Value, gradient, Hessian and parameter cross-derivative of the unrolled cost.

    Forward pass propagates state sensitivities ``dx_i/du`` and
    ``dx_i/dtheta``; the backward pass computes the adjoint ``lambda_i``
    (the dynamics multipliers) so that second-order terms of ``f`` enter
    through ``sum_k lambda_{i+1,k} d^2 f_k``.
    """
    H, n, m, d = model.H, model.n, model.m, model.d
    th_c, th_H, th_f = model.split(theta)
    U = _as_actions(model, u_seq)
    mH, nv = m * H, n + m
    need2 = order >= 2
    with_theta = with_theta and need2

    xs = np.empty((H + 1, n))
    xs[0] = np.asarray(x_init, dtype=float).reshape(n)
    cds, fds = [], []
    for i in range(H):
        cd = model.stage.derivs(th_c, xs[i], U[i], with_theta=with_theta)
        if penalty is not None:
            cd = penalty.augment_stage(i, xs[i], U[i], cd)
        fd = model.dynamics.derivs(th_f, xs[i], U[i], with_theta=with_theta)
        xs[i + 1] = fd.f
        cds.append(cd)
        fds.append(fd)
    td = model.terminal.derivs(th_H, xs[H], with_theta=with_theta)
    if penalty is not None:
        td = penalty.augment_terminal(xs[H], td)
    J = sum(cd.c for cd in cds) + td.c
    if not np.isfinite(J):
        raise NonFiniteEvaluation("unrolled cost is not finite")
    if order == 0:
        return UnrolledDerivs(float(J), None, None, None, xs, None)

    lam = np.empty((H + 1, n))
    lam[H] = td.cx
    grad = np.empty(mH)
    for i in range(H - 1, -1, -1):
        grad[i * m : (i + 1) * m] = cds[i].cu + fds[i].fu.T @ lam[i + 1]
        lam[i] = cds[i].cx + fds[i].fx.T @ lam[i + 1]
    if not np.all(np.isfinite(grad)):
        raise NonFiniteEvaluation("unrolled gradient is not finite")
    if not need2:
        return UnrolledDerivs(float(J), grad, None, None, xs, lam)

    hess = np.zeros((mH, mH))
    cross = np.zeros((mH, d)) if with_theta else None
    S = np.zeros((n, mH))  # dx_i/du
    P = np.zeros((n, d)) if with_theta else None  # dx_i/dtheta at fixed u
    V = np.zeros((nv, mH))
    Lvv = np.empty((nv, nv))
    for i in range(H):
        cd, fd = cds[i], fds[i]
        Lvv[:n, :n] = cd.cxx
        Lvv[:n, n:] = cd.cxu
        Lvv[n:, :n] = cd.cxu.T
        Lvv[n:, n:] = cd.cuu
        if fd.fvv is not None:
            Lvv += np.tensordot(lam[i + 1], fd.fvv, axes=1)
        V[:n] = S
        V[n:] = 0.0
        V[n:, i * m : (i + 1) * m] = np.eye(m)
        hess += V.T @ (Lvv @ V)
        if with_theta:
            Lvt = Lvv[:, :n] @ P
            Lvt[:n, model.sl_c] += cd.cx_theta
            Lvt[n:, model.sl_c] += cd.cu_theta
            if fd.fv_theta is not None:
                Lvt[:, model.sl_f] += np.tensordot(lam[i + 1], fd.fv_theta, axes=1)
            cross += V.T @ Lvt
            Pn = fd.fx @ P
            Pn[:, model.sl_f] += fd.f_theta
            P = Pn
        S = fd.fx @ S
        S[:, i * m : (i + 1) * m] += fd.fu
    hess += S.T @ td.cxx @ S
    hess = 0.5 * (hess + hess.T)
    if with_theta:
        Lt = td.cxx @ P
        Lt[:, model.sl_H] += td.cx_theta
        cross += S.T @ Lt
    return UnrolledDerivs(float(J), grad, hess, cross, xs, lam)


class _ALPenalty:
    """Augmented-Lagrangian terms for general inequality callbacks."""

    def __init__(self, cons, H, mu, mu_T, rho):
        self.cons, self.H, self.mu, self.mu_T, self.rho = cons, H, mu, mu_T, rho

    @staticmethod
    def _terms(gv, G, Hg, mu, rho):
        s = np.maximum(0.0, mu + rho * gv)
        val = float(np.sum(s * s - mu * mu) / (2.0 * rho))
        grad = G.T @ s
        act = s > 0
        hess = rho * G[act].T @ G[act]
        if Hg is not None and np.any(act):
            hess = hess + np.einsum("k,kab->ab", s[act], Hg[act])
        return val, grad, hess

    def _stage(self, i, x, u):
        c = self.cons
        v = np.concatenate([x, u])
        gv = np.asarray(c.g(x, u), float).reshape(c.n_g)
        G = np.asarray(c.g_jac(x, u), float).reshape(c.n_g, v.size)
        Hg = None if c.g_hess is None else np.asarray(c.g_hess(x, u), float).reshape(c.n_g, v.size, v.size)
        return self._terms(gv, G, Hg, self.mu[i], self.rho)

    def _term(self, x):
        c = self.cons
        gv = np.asarray(c.g_terminal(x), float).reshape(c.n_g_terminal)
        G = np.asarray(c.g_terminal_jac(x), float).reshape(c.n_g_terminal, x.size)
        Hg = None
        if c.g_terminal_hess is not None:
            Hg = np.asarray(c.g_terminal_hess(x), float).reshape(c.n_g_terminal, x.size, x.size)
        return self._terms(gv, G, Hg, self.mu_T, self.rho)

    def stage_value(self, i, x, u):
        return self._stage(i, x, u)[0] if self.cons.g is not None else 0.0

    def terminal_value(self, x):
        return self._term(x)[0] if self.cons.g_terminal is not None else 0.0

    def augment_stage(self, i, x, u, cd):
        if self.cons.g is None:
            return cd
        n = x.size
        val, g, H = self._stage(i, x, u)
        return cd._replace(
            c=cd.c + val, cx=cd.cx + g[:n], cu=cd.cu + g[n:],
            cxx=cd.cxx + H[:n, :n], cuu=cd.cuu + H[n:, n:], cxu=cd.cxu + H[:n, n:],
        )

    def augment_terminal(self, x, td):
        if self.cons.g_terminal is None:
            return td
        val, g, H = self._term(x)
        return td._replace(c=td.c + val, cx=td.cx + g, cxx=td.cxx + H)


class _LinearTerms:
    """``sum mu' g`` as an additive cost, for Lagrangian gradients at fixed multipliers."""

    def __init__(self, cons, mu, mu_T):
        self.cons, self.mu, self.mu_T = cons, mu, mu_T

    def stage_value(self, i, x, u):
        return 0.0

    def terminal_value(self, x):
        return 0.0

    def augment_stage(self, i, x, u, cd):
        c = self.cons
        if c.g is None:
            return cd
        G = np.asarray(c.g_jac(x, u), float).reshape(c.n_g, x.size + u.size)
        gv = G.T @ self.mu[i]
        return cd._replace(cx=cd.cx + gv[: x.size], cu=cd.cu + gv[x.size :])

    def augment_terminal(self, x, td):
        c = self.cons
        if c.g_terminal is None:
            return td
        G = np.asarray(c.g_terminal_jac(x), float).reshape(c.n_g_terminal, x.size)
        return td._replace(cx=td.cx + G.T @ self.mu_T)


def _eval_general(cons, xs, U):
    """Stage and terminal values of the general inequality callbacks."""
    H = U.shape[0]
    gs = np.zeros((H, cons.n_g))
    if cons.g is not None:
        for i in range(H):
            gs[i] = np.asarray(cons.g(xs[i], U[i]), float).reshape(cons.n_g)
    gT = np.zeros(cons.n_g_terminal)
    if cons.g_terminal is not None:
        gT = np.asarray(cons.g_terminal(xs[H]), float).reshape(cons.n_g_terminal)
    return gs, gT


def _projected_newton(model, theta, x_init, u, lo, hi, cfg, penalty, stats):
    """Projected damped Newton on the unrolled objective with box bounds.

    Returns ``(u, J, grad, pg_norm)``. Sets ``stats['converged']`` when the
    projected gradient norm reaches ``cfg.grad_tol``.
    """
    u = np.clip(u, lo, hi)
    stats["converged"] = False
    for _ in range(cfg.max_iters + 1):
        ud = unrolled_derivs(model, theta, x_init, u, order=2, with_theta=False, penalty=penalty)
        J, g, Hm = ud.J, ud.grad, ud.hess
        pg = u - np.clip(u - g, lo, hi)
        pgn = float(np.linalg.norm(pg))
        if pgn <= cfg.grad_tol:
            stats["converged"] = True
            return u, J, g, pgn
        if stats["iterations"] >= stats["budget"]:
            break
        eps = min(cfg.active_tol, pgn)
        binding = ((u <= lo + eps) & (g > 0)) | ((u >= hi - eps) & (g < 0))
        free = ~binding
        dirn = -g.copy()
        if np.any(free):
            Hff = Hm[np.ix_(free, free)]
            try:
                cf = scipy.linalg.cho_factor(Hff, check_finite=False)
                dirn[free] = -scipy.linalg.cho_solve(cf, g[free], check_finite=False)
            except np.linalg.LinAlgError:
                if not stats["nonconvex"]:
                    logger.debug("negative curvature in unrolled Hessian; gradient step")
                stats["nonconvex"] = True
        alpha, accepted = 1.0, False
        tiny = 1e-13 * (1.0 + abs(J))
        for _ in range(cfg.max_backtracks):
            un = np.clip(u + alpha * dirn, lo, hi)
            slope = float(g @ (un - u))
            try:
                Jn = unrolled_cost(model, theta, x_init, un, penalty)
            except NonFiniteEvaluation:
                Jn = np.inf
            # near the optimum the decrease drowns in rounding; accept if not worse
            if Jn <= J + cfg.armijo_c * slope or (abs(slope) <= tiny and Jn <= J + tiny):
                accepted = True
                break
            alpha *= cfg.backtrack
        stats["iterations"] += 1
        if not accepted:
            stats["message"] = "line search failed"
            return u, J, g, pgn
        u = un
    stats["message"] = stats.get("message") or "maximum iterations reached"
    return u, J, g, pgn


def solve_plan(model, theta, x_init, constraints=None, cfg=None):
    """Solve the planning problem.

    Never raises for non-convergence: the best iterate comes back with
    ``converged=False`` and a message.
    """
    cfg = cfg or SolverCfg()
    cons = constraints or NO_CONSTRAINTS
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    H, m = model.H, model.m
    x_init = np.asarray(x_init, dtype=float).reshape(model.n)
    lo, hi = cons.bounds(H, m)
    lo, hi = lo.reshape(-1), hi.reshape(-1)
    u = np.zeros(H * m) if cfg.warm_start is None else np.array(cfg.warm_start, float).reshape(-1)
    if u.size != H * m:
        raise DimensionMismatch(f"warm_start has {u.size} entries, expected {H * m}")
    stats = {"iterations": 0, "budget": cfg.max_iters, "nonconvex": False, "message": ""}

    if not cons.has_general:
        u, J, g, pgn = _projected_newton(model, theta, x_init, u, lo, hi, cfg, None, stats)
        converged = stats["converged"]
    else:
        u, J, pgn, converged = _augmented_lagrangian(model, theta, x_init, u, lo, hi, cons, cfg, stats)

    plan = assemble_solution(model, theta, x_init, u, cons, cfg)
    plan.iterations = stats["iterations"]
    plan.converged = bool(converged)
    plan.objective = float(J)
    plan.grad_norm = pgn
    plan.nonconvex_detected = stats["nonconvex"]
    if not converged:
        plan.message = stats["message"] or "not converged"
    return plan


def _augmented_lagrangian(model, theta, x_init, u, lo, hi, cons, cfg, stats):
    H, m = model.H, model.m
    mu = np.zeros((H, cons.n_g))
    mu_T = np.zeros(cons.n_g_terminal)
    rho = cfg.al_rho0
    viol_prev = np.inf
    converged = False
    for _ in range(cfg.al_max_outer):
        pen = _ALPenalty(cons, H, mu, mu_T, rho)
        u, J, g, pgn = _projected_newton(model, theta, x_init, u, lo, hi, cfg, pen, stats)
        xs = rollout_states(model, theta, x_init, u)
        gs, gT = _eval_general(cons, xs, u.reshape(H, m))
        mu = np.maximum(0.0, mu + rho * gs)
        mu_T = np.maximum(0.0, mu_T + rho * gT)
        # feasibility and complementarity of the updated multipliers
        viol = max(
            float(np.max(np.abs(np.minimum(-gs, mu)), initial=0.0)),
            float(np.max(np.abs(np.minimum(-gT, mu_T)), initial=0.0)),
        )
        if stats["converged"] and viol <= cfg.grad_tol:
            converged = True
            break
        if stats["iterations"] >= stats["budget"]:
            break
        if viol > 0.25 * viol_prev:
            rho = min(rho * 10.0, cfg.al_rho_max)
        viol_prev = viol
    # stationarity of the plain Lagrangian at the final multipliers
    lin = _LinearTerms(cons, mu, mu_T)
    g = unrolled_derivs(model, theta, x_init, u, order=1, penalty=lin).grad
    pgn = float(np.linalg.norm(u - np.clip(u - g, lo, hi)))
    converged = converged and pgn <= 10 * cfg.grad_tol
    if not converged and not stats["message"]:
        stats["message"] = "augmented Lagrangian did not reach tolerance"
    return u, unrolled_cost(model, theta, x_init, u), pgn, converged


def ineq_values(model, plan, constraints):
    """All inequality values (``<= 0`` feasible) in canonical order."""
    cons = constraints or NO_CONSTRAINTS
    H, m = model.H, model.m
    enum = cons.enumerate(H, m)
    if not enum:
        return np.zeros(0)
    lo, hi = cons.bounds(H, m)
    xs, U = plan.states, plan.actions
    gs, gT = (None, None)
    if cons.has_general:
        gs, gT = _eval_general(cons, xs, U)
    vals = []
    for c in enum:
        if c.kind == "lower":
            vals.append(lo[c.step, c.index] - U[c.step, c.index])
        elif c.kind == "upper":
            vals.append(U[c.step, c.index] - hi[c.step, c.index])
        elif c.kind == "g":
            vals.append(gs[c.step, c.index])
        else:
            vals.append(gT[c.index])
    return np.asarray(vals, dtype=float)


def detect_active_set(model, plan, constraints, tol=ACTIVE_TOL):
    """Indices (canonical order) of inequalities with ``g_i >= -tol``."""
    vals = ineq_values(model, plan, constraints)
    return [int(k) for k in np.flatnonzero(vals >= -tol)]


def constraint_system(model, theta, plan, constraints, active=None):
    """Stacked active constraints at a plan.

    Returns ``(A, z, grad_zeta, rows, cache)`` where ``A = dz/dzeta``,
    ``grad_zeta`` is the gradient of the planning objective in zeta, and
    ``cache`` keeps the per-stage model derivatives for reuse.
    """
    cons = constraints or NO_CONSTRAINTS
    H, n, m = model.H, model.n, model.m
    lay = ZetaLayout(n, m, H)
    th_c, th_H, th_f = model.split(theta)
    xs, U = plan.states, plan.actions
    enum = cons.enumerate(H, m)
    active = plan.active_set if active is None else active
    act_by_step = {}
    for k in active:
        act_by_step.setdefault(enum[k].step, []).append(k)
    lo, hi = cons.bounds(H, m)

    grad = np.zeros(lay.dim)
    rows_A, rows_z, labels = [], [], []
    cds, fds = [], []

    def add_row(arow, zval, label):
        rows_A.append(arow)
        rows_z.append(zval)
        labels.append(label)

    for j in range(n):
        a = np.zeros(lay.dim)
        a[lay.x(0).start + j] = 1.0
        add_row(a, xs[0, j] - plan.x_init[j], ("pin", 0, j))

    def ineq_rows(i, ks):
        for k in ks:
            c = enum[k]
            a = np.zeros(lay.dim)
            if c.kind == "lower":
                a[lay.u(i).start + c.index] = -1.0
                add_row(a, lo[i, c.index] - U[i, c.index], ("ineq", k, c))
            elif c.kind == "upper":
                a[lay.u(i).start + c.index] = 1.0
                add_row(a, U[i, c.index] - hi[i, c.index], ("ineq", k, c))
            elif c.kind == "g":
                G = np.asarray(cons.g_jac(xs[i], U[i]), float).reshape(cons.n_g, n + m)
                a[lay.v(i)] = G[c.index]
                add_row(a, float(np.asarray(cons.g(xs[i], U[i]), float).reshape(-1)[c.index]), ("ineq", k, c))
            else:
                G = np.asarray(cons.g_terminal_jac(xs[H]), float).reshape(cons.n_g_terminal, n)
                a[lay.x(H)] = G[c.index]
                add_row(a, float(np.asarray(cons.g_terminal(xs[H]), float).reshape(-1)[c.index]), ("ineq", k, c))

    for i in range(H):
        cd = model.stage.derivs(th_c, xs[i], U[i], with_theta=False)
        fd = model.dynamics.derivs(th_f, xs[i], U[i], with_theta=False)
        cds.append(cd)
        fds.append(fd)
        grad[lay.x(i)] = cd.cx
        grad[lay.u(i)] = cd.cu
        ineq_rows(i, act_by_step.get(i, []))
        for j in range(n):
            a = np.zeros(lay.dim)
            a[lay.x(i + 1).start + j] = 1.0
            a[lay.x(i)] = -fd.fx[j]
            a[lay.u(i)] = -fd.fu[j]
            add_row(a, xs[i + 1, j] - fd.f[j], ("dyn", i, j))
    td = model.terminal.derivs(th_H, xs[H], with_theta=False)
    grad[lay.x(H)] = td.cx
    ineq_rows(H, act_by_step.get(H, []))
    A = np.vstack(rows_A)
    return A, np.asarray(rows_z), grad, labels, {"stage": cds, "dyn": fds, "terminal": td, "layout": lay}


def recover_multipliers(A, grad_zeta):
    """Least-squares solution of ``lambda' A = grad_zeta`` and its residual."""
    lam, *_ = np.linalg.lstsq(A.T, grad_zeta, rcond=None)
    return lam, float(np.max(np.abs(grad_zeta - A.T @ lam), initial=0.0))


def assemble_solution(model, theta, x_init, u, constraints, cfg):
    """Build a :class:`PlanSolution` at ``u``; multiplier recovery is deferred."""
    cons = constraints or NO_CONSTRAINTS
    H, m = model.H, model.m
    xs = rollout_states(model, theta, x_init, u)
    plan = PlanSolution(
        states=xs, actions=np.asarray(u, float).reshape(H, m).copy(), active_set=[],
        iterations=0, converged=False, x_init=np.asarray(x_init, float).copy(),
        _context=(model, np.array(theta, dtype=float), cons),
    )
    plan.active_set = detect_active_set(model, plan, cons, cfg.active_tol)
    return plan


def _plan_diagnostics(model, theta, plan, cons):
    A, z, grad, labels, _ = constraint_system(model, theta, plan, cons)
    lam, _ = recover_multipliers(A, grad)
    res = _residual(model, plan, cons, A, z, grad, lam)
    scale = 1.0 + float(np.max(np.abs(grad)))
    rows = [k for k, r in enumerate(labels) if r[0] == "ineq"]
    weak = [k for k, lam_k in zip(plan.active_set, -lam[rows]) if abs(lam_k) <= 1e-8 * scale]
    return {"multipliers": lam, "z_rows": labels, "kkt_residual": res, "weakly_active": weak}


def _residual(model, plan, cons, A, z, grad, lam):
    stat = grad - A.T @ lam
    viol = ineq_values(model, plan, cons)
    worst_ineq = float(np.max(np.maximum(viol, 0.0), initial=0.0))
    return max(float(np.max(np.abs(stat))), float(np.max(np.abs(z), initial=0.0)), worst_ineq)


def kkt_residual(model, theta, plan, constraints=None):
    """Max-norm of the stationarity residual and constraint violation at a plan,
    using the plan's stored multipliers."""
    cons = constraints or NO_CONSTRAINTS
    A, z, grad, _, _ = constraint_system(model, theta, plan, cons)
    if plan.multipliers.size != A.shape[0]:
        raise DimensionMismatch("plan multipliers do not match the stacked constraints")
    return _residual(model, plan, cons, A, z, grad, plan.multipliers)


def shift_warm_start(actions):
    """Receding-horizon warm start: drop the first action and repeat the last."""
    a = np.asarray(actions, float)
    return np.vstack([a[1:], a[-1:]]).reshape(-1)


def with_warm_start(cfg, actions):
    return replace(cfg, warm_start=None if actions is None else np.asarray(actions, float).reshape(-1))
