"""Policy Jacobians by implicit differentiation of the planning problem.

Two analytic routes are provided. The KKT route differentiates the full
stationarity system in ``zeta`` with the stacked constraints ``z``::

    d zeta*/d theta = D^-1 A' (A D^-1 A')^-1 (A D^-1 B - C) - D^-1 B

and the unconstrained route differentiates ``grad_u J = 0`` directly::

    d u*/d theta = -(hess_uu J)^-1 cross_theta_u J

A finite-difference-through-resolve oracle backs both.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import (
    ActiveConstraintsPresent,
    DiffOPError,
    DimensionMismatch,
    RankDeficient,
    SingularMatrix,
)
from .numkit import LUSolver, fd_jacobian, rel_err
from .ocp import NO_CONSTRAINTS, SolverCfg, constraint_system, solve_plan, unrolled_derivs

logger = logging.getLogger(__name__)


class KktBlocks(NamedTuple):
    A: np.ndarray  # (n_z, dim_zeta)
    B: np.ndarray  # (dim_zeta, d)
    C: np.ndarray  # (n_z, d)
    D: np.ndarray  # (dim_zeta, dim_zeta)
    n: int
    m: int
    H: int
    rows: list


def build_kkt_blocks(model, theta, plan, constraints=None):
    """Assemble ``A, B, C, D`` at a solved plan from the model derivative callbacks."""
    cons = constraints or NO_CONSTRAINTS
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    n, m, H, d = model.n, model.m, model.H, model.d
    if plan.states.shape != (H + 1, n) or plan.actions.shape != (H, m):
        raise DimensionMismatch("plan does not match the model dimensions")
    A, _, _, rows, cache = constraint_system(model, theta, plan, cons)
    if plan.multipliers.size != A.shape[0]:
        raise DimensionMismatch("plan multipliers do not match the stacked constraints")
    lay = cache["layout"]
    th_c, th_H, th_f = model.split(theta)
    xs, U = plan.states, plan.actions
    lam = plan.multipliers

    D = np.zeros((lay.dim, lay.dim))
    B = np.zeros((lay.dim, d))
    C = np.zeros((A.shape[0], d))
    # per-step stage blocks; dynamics Jacobians with respect to theta are recomputed
    for i in range(H):
        cd = model.stage.derivs(th_c, xs[i], U[i], with_theta=True)
        vi = lay.v(i)
        D[vi, vi] += np.block([[cd.cxx, cd.cxu], [cd.cxu.T, cd.cuu]])
        B[lay.x(i), model.sl_c] += cd.cx_theta
        B[lay.u(i), model.sl_c] += cd.cu_theta
    td = model.terminal.derivs(th_H, xs[H], with_theta=True)
    D[lay.x(H), lay.x(H)] += td.cxx
    B[lay.x(H), model.sl_H] += td.cx_theta

    fd_cache = {}
    for r, label in enumerate(rows):
        kind = label[0]
        if kind == "dyn":
            i, j = label[1], label[2]
            if i not in fd_cache:
                fd_cache[i] = model.dynamics.derivs(th_f, xs[i], U[i], with_theta=True)
            fdi = fd_cache[i]
            vi = lay.v(i)
            # z = x_{i+1} - f(v_i): second derivatives enter with a minus sign
            if fdi.fvv is not None:
                D[vi, vi] += lam[r] * fdi.fvv[j]
            if fdi.fv_theta is not None:
                B[vi, model.sl_f] += lam[r] * fdi.fv_theta[j]
            C[r, model.sl_f] = -fdi.f_theta[j]
        elif kind == "ineq":
            c = label[2]
            if c.kind == "g" and cons.g_hess is not None:
                Hg = np.asarray(cons.g_hess(xs[c.step], U[c.step]), float).reshape(cons.n_g, n + m, n + m)
                vi = lay.v(c.step)
                D[vi, vi] -= lam[r] * Hg[c.index]
            elif c.kind == "g_terminal" and cons.g_terminal_hess is not None:
                Hg = np.asarray(cons.g_terminal_hess(xs[H]), float).reshape(cons.n_g_terminal, n, n)
                D[lay.x(H), lay.x(H)] -= lam[r] * Hg[c.index]
    D = 0.5 * (D + D.T)
    return KktBlocks(A, B, C, D, n, m, H, rows)


def grad_kkt(blocks, full=False):
    """``d zeta*/d theta`` via LU factorizations of ``D`` and ``A D^-1 A'``.

    Returns the ``u*_0`` rows ``n:n+m`` (shape ``(m, d)``), or the full
    ``(dim_zeta, d)`` matrix when ``full`` is set.
    """
    A, B, C, D = blocks.A, blocks.B, blocks.C, blocks.D
    Dlu = LUSolver(D)
    DiAt = Dlu.solve(A.T)
    DiB = Dlu.solve(B)
    try:
        Slu = LUSolver(A @ DiAt)
    except SingularMatrix as exc:
        raise RankDeficient(f"constraint Jacobian A is rank deficient: {exc}") from exc
    X = Slu.solve(A @ DiB - C)
    dzeta = DiAt @ X - DiB
    if full:
        return dzeta
    return dzeta[blocks.n : blocks.n + blocks.m]


def zeta_to_u(blocks, dzeta):
    """Rows of a ``zeta`` Jacobian belonging to ``u_0 ... u_{H-1}`` stacked."""
    n, m, H = blocks.n, blocks.m, blocks.H
    idx = np.concatenate([np.arange(i * (n + m) + n, i * (n + m) + n + m) for i in range(H)])
    return dzeta[idx]


def grad_unconstrained(model, theta, x_init, plan, full=False):
    """``-(hess_uu J)^-1 cross`` at the plan; ``(m, d)`` first-action slice by default."""
    if plan.active_set:
        raise ActiveConstraintsPresent(f"{len(plan.active_set)} active inequality constraints")
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    ud = unrolled_derivs(model, theta, x_init, plan.u_seq, order=2, with_theta=True)
    G = -LUSolver(ud.hess).solve(ud.cross)
    return G if full else G[: model.m]


def grad_reduced(model, theta, x_init, plan, constraints=None, full=False):
    """Unconstrained route restricted to actions not clamped at a box bound.

    Valid when the active set holds only box bounds (with bounds independent
    of theta); clamped coordinates have zero sensitivity.
    """
    cons = constraints or NO_CONSTRAINTS
    enum = cons.enumerate(model.H, model.m)
    fixed = np.zeros(model.H * model.m, dtype=bool)
    for k in plan.active_set:
        c = enum[k]
        if c.kind not in ("lower", "upper"):
            raise ActiveConstraintsPresent("general inequality active; use the KKT route")
        fixed[c.step * model.m + c.index] = True
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    ud = unrolled_derivs(model, theta, x_init, plan.u_seq, order=2, with_theta=True)
    G = np.zeros((model.H * model.m, model.d))
    free = ~fixed
    if np.any(free):
        G[free] = -LUSolver(ud.hess[np.ix_(free, free)]).solve(ud.cross[free])
    return G if full else G[: model.m]


def policy_jacobian(model, theta, x_init, plan, constraints=None, method="auto"):
    """``d u*_0 / d theta`` (shape ``(m, d)``) by the requested route.

    ``auto`` picks the unconstrained shortcut when nothing is active, the
    reduced route for box-only active sets and the KKT route otherwise.
    """
    if method == "auto":
        if not plan.active_set:
            method = "unconstrained"
        else:
            enum = (constraints or NO_CONSTRAINTS).enumerate(model.H, model.m)
            box_only = all(enum[k].kind in ("lower", "upper") for k in plan.active_set)
            method = "reduced" if box_only else "kkt"
    if method == "unconstrained":
        return grad_unconstrained(model, theta, x_init, plan)
    if method == "reduced":
        return grad_reduced(model, theta, x_init, plan, constraints)
    if method == "kkt":
        return grad_kkt(build_kkt_blocks(model, theta, plan, constraints))
    raise ValueError(f"unknown method {method!r}")


def fd_through_resolve(model, theta, x_init, constraints=None, cfg=None, h=None, warm=None, full=False):
    """Central differences of ``theta -> u*`` with a fresh solve per probe.

    Returns ``(jacobian, all_converged)``.
    """
    cfg = cfg or SolverCfg(grad_tol=1e-12)
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    if warm is not None:
        cfg = replace(cfg, warm_start=np.asarray(warm, float).reshape(-1))
    ok = [True]

    def solve(th):
        p = solve_plan(model, th, x_init, constraints, cfg)
        ok[0] = ok[0] and p.converged
        return p.u_seq if full else p.u0

    J = fd_jacobian(solve, theta, h)
    return J, ok[0]


@dataclass
class GradReport:
    """Analytic and oracle policy Jacobians with pairwise relative errors."""

    analytic: Optional[np.ndarray]
    oracle: Optional[np.ndarray]
    max_rel_err: float
    methods: tuple
    routes: dict = field(default_factory=dict)
    pairwise: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    unreliable: bool = False

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "analytic": arr(self.analytic),
            "oracle": arr(self.oracle),
            "max_rel_err": self.max_rel_err,
            "methods": list(self.methods),
            "routes": {k: arr(v) for k, v in self.routes.items()},
            "pairwise": dict(self.pairwise),
            "notes": list(self.notes),
            "unreliable": self.unreliable,
        }

    def to_json(self):
        from .models import dumps_17g

        return dumps_17g(self.to_dict())

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        conv = lambda a: None if a is None else np.asarray(a, float)  # noqa: E731
        return cls(
            analytic=conv(d["analytic"]), oracle=conv(d["oracle"]), max_rel_err=float(d["max_rel_err"]),
            methods=tuple(d["methods"]), routes={k: conv(v) for k, v in d["routes"].items()},
            pairwise={k: float(v) for k, v in d["pairwise"].items()}, notes=list(d["notes"]),
            unreliable=bool(d["unreliable"]),
        )

    def error(self, a, b):
        return self.pairwise.get(f"{a}|{b}", self.pairwise.get(f"{b}|{a}"))


def crosscheck(
    model, theta, x_init, plan, constraints=None, fd=True, fd_cfg=None, fd_h=None, full=False, floor=1e-12
):
    """Run every applicable route plus the finite-difference oracle.

    Route failures become notes; the report is always returned. ``floor``
    is the smallest magnitude used to scale relative errors, so Jacobians
    that vanish (fully clamped plans) are compared in absolute terms.
    """
    theta = np.asarray(getattr(theta, "flat", theta), dtype=float)
    routes, notes = {}, []
    unreliable = not plan.converged
    if unreliable:
        notes.append("plan not converged: comparison unreliable")
    if plan.weakly_active:
        notes.append(f"weakly active constraints {plan.weakly_active}: gradient may be nondifferentiable")
    try:
        blocks = build_kkt_blocks(model, theta, plan, constraints)
        dz = grad_kkt(blocks, full=True)
        routes["kkt"] = zeta_to_u(blocks, dz) if full else dz[model.n : model.n + model.m]
    except DiffOPError as exc:
        notes.append(f"kkt: {type(exc).__name__}: {exc}")
    if not plan.active_set:
        try:
            routes["unconstrained"] = grad_unconstrained(model, theta, x_init, plan, full=full)
        except DiffOPError as exc:
            notes.append(f"unconstrained: {type(exc).__name__}: {exc}")
    else:
        try:
            routes["reduced"] = grad_reduced(model, theta, x_init, plan, constraints, full=full)
        except DiffOPError as exc:
            notes.append(f"reduced: {type(exc).__name__}: {exc}")
    oracle = None
    if fd:
        try:
            oracle, ok = fd_through_resolve(model, theta, x_init, constraints, fd_cfg, fd_h, warm=plan.u_seq, full=full)
            if not ok:
                notes.append("finite-difference re-solves did not all converge")
                unreliable = True
            routes["fd"] = oracle
        except DiffOPError as exc:
            notes.append(f"fd: {type(exc).__name__}: {exc}")
    names = list(routes)
    pairwise = {}
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            pairwise[f"{names[a]}|{names[b]}"] = rel_err(routes[names[a]], routes[names[b]], floor)
    analytic_name = next((k for k in names if k != "fd"), None)
    worst = max(pairwise.values()) if pairwise else float("nan")
    return GradReport(
        analytic=routes.get(analytic_name) if analytic_name else None,
        oracle=oracle,
        max_rel_err=float(worst),
        methods=tuple(names),
        routes=routes,
        pairwise=pairwise,
        notes=notes,
        unreliable=unreliable,
    )
