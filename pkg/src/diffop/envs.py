"""Simulated ground-truth systems: cartpole, two-link arm and quadrotor.

All systems are Euler-discretized ``x' = x + dt * f(x, u)``. Each
right-hand side is written once against a math namespace so the same
code runs on floats (``numpy``) and symbols (``sympy``); the symbolic form
supplies exact derivatives for the true-model planning baseline.

Conventions:

* cartpole state ``[y, phi, y_dot, phi_dot]``; the printed ODE has its
  equilibrium at ``phi = 0``.
* arm state ``[q1, q2, q1_dot, q2_dot]`` with angles measured from the
  downward vertical, so ``q = 0, u = 0`` is the stable rest position.
  Links are uniform rods with the center of mass at the midpoint.
* quadrotor state ``[p(3), v(3), q(4), w(3)]``; ``q`` is a scalar-first
  Hamilton unit quaternion (body to world), ``w`` the body angular
  velocity and gravity points along ``-z``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DimensionMismatch, NonFiniteEvaluation, SingularMatrix
from .models import PolicyModel, SymbolicCost, SymbolicDynamics, ZeroTerminalCost

ENV_NAMES = ("cartpole", "cartpole_linear", "robotarm", "quadrotor")


@dataclass
class EnvState:
    x: np.ndarray
    t: int = 0


@dataclass
class EnvSpec:
    """Physical and cost parameters of one environment.

    Units: masses kg, lengths m, ``g`` m/s^2, inertia kg m^2, ``dt`` s.
    ``cost`` holds ``q`` (per-state weights, used as ``||q * dx||^2``) and
    ``R`` for cartpole; ``Q`` and ``R`` matrices for the arm;
    ``alpha`` (4 weights) and optional ``r_u`` for the quadrotor.
    """

    name: str
    n: int
    m: int
    dt: float
    T: int = 20
    params: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    x_goal: Optional[list] = None
    x0: Optional[list] = None
    action_scale: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        for k, v in self.params.items():
            arr = np.asarray(v, dtype=float)
            if np.any(arr <= 0):
                raise ConfigError(f"physical parameter {k} must be positive")
        for key in ("x_goal", "x0"):
            val = getattr(self, key)
            if val is not None:
                val = [float(v) for v in val]
                if len(val) != self.n:
                    raise ConfigError(f"{key} must have length {self.n}")
                setattr(self, key, val)

    def goal(self):
        return np.zeros(self.n) if self.x_goal is None else np.asarray(self.x_goal, float)

    def initial(self):
        return np.zeros(self.n) if self.x0 is None else np.asarray(self.x0, float)


# ---------------------------------------------------------------- cartpole


def cartpole_rhs(x, u, lib, p):
    y, phi, yd, phid = x
    F = u[0]
    mc, mp, l, g = p["m_c"], p["m_p"], p["l"], p["g"]
    s, c = lib.sin(phi), lib.cos(phi)
    den = mc + mp * s * s
    ydd = (F + mp * s * (l * phid * phid + g * c)) / den
    phidd = (-F * c - mp * l * phid * phid * s * c - (mc + mp) * g * s) / (l * den)
    return [yd, phid, ydd, phidd]


def cartpole_linear_rhs(x, u, lib, p):
    """First-order expansion of :func:`cartpole_rhs` about the origin."""
    y, phi, yd, phid = x
    F = u[0]
    mc, mp, l, g = p["m_c"], p["m_p"], p["l"], p["g"]
    return [yd, phid, (F + mp * g * phi) / mc, (-F - (mc + mp) * g * phi) / (l * mc)]


def cartpole_cost_expr(x, u, lib, goal, cost):
    q, R = cost["q"], cost["R"]
    return sum((q[i] * (x[i] - goal[i])) ** 2 for i in range(4)) + R * u[0] ** 2


# ---------------------------------------------------------------- robot arm


def arm_matrices(q, qd, lib, p):
    """Inertia ``M``, Coriolis vector ``C(q, qd) qd`` and gravity ``G`` as nested lists."""
    m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
    lc1, lc2 = 0.5 * l1, 0.5 * l2
    I1, I2 = m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0
    c2, s2 = lib.cos(q[1]), lib.sin(q[1])
    d11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * c2) + I1 + I2
    d12 = m2 * (lc2**2 + l1 * lc2 * c2) + I2
    d22 = m2 * lc2**2 + I2
    h = -m2 * l1 * lc2 * s2
    Cqd = [h * qd[1] * (2 * qd[0] + qd[1]), -h * qd[0] ** 2]
    G = [
        m1 * g * lc1 * lib.sin(q[0]) + m2 * g * (l1 * lib.sin(q[0]) + lc2 * lib.sin(q[0] + q[1])),
        m2 * g * lc2 * lib.sin(q[0] + q[1]),
    ]
    return [[d11, d12], [d12, d22]], Cqd, G


def robotarm_rhs(x, u, lib, p):
    q, qd = x[:2], x[2:]
    M, Cqd, G = arm_matrices(q, qd, lib, p)
    det = M[0][0] * M[1][1] - M[0][1] * M[1][0]
    r0 = u[0] - Cqd[0] - G[0]
    r1 = u[1] - Cqd[1] - G[1]
    qdd0 = (M[1][1] * r0 - M[0][1] * r1) / det
    qdd1 = (-M[1][0] * r0 + M[0][0] * r1) / det
    return [qd[0], qd[1], qdd0, qdd1]


def arm_energy(x, p):
    """Kinetic plus potential energy (zero potential at the pivot height)."""
    x = np.asarray(x, float)
    M, _, _ = arm_matrices(x[:2], x[2:], np, p)
    M = np.asarray(M, dtype=float)
    qd = x[2:]
    m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
    P = -m1 * g * 0.5 * l1 * np.cos(x[0]) - m2 * g * (l1 * np.cos(x[0]) + 0.5 * l2 * np.cos(x[0] + x[1]))
    return float(0.5 * qd @ M @ qd + P)


def arm_cost_expr(x, u, lib, goal, cost):
    Q, R = np.asarray(cost["Q"], float), np.asarray(cost["R"], float)
    dx = [x[i] - goal[i] for i in range(4)]
    val = sum(Q[i, j] * dx[i] * dx[j] for i in range(4) for j in range(4))
    return val + sum(R[i, j] * u[i] * u[j] for i in range(2) for j in range(2))


# ---------------------------------------------------------------- quadrotor


def quat_to_dcm(q, lib=np):
    """Rotation matrix (body to world) of a scalar-first Hamilton quaternion."""
    q0, q1, q2, q3 = q
    return [
        [1 - 2 * (q2 * q2 + q3 * q3), 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), 1 - 2 * (q1 * q1 + q3 * q3), 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), 1 - 2 * (q1 * q1 + q2 * q2)],
    ]


def omega_matrix(w):
    wx, wy, wz = w
    return [
        [0, -wx, -wy, -wz],
        [wx, 0, wz, -wy],
        [wy, -wz, 0, wx],
        [wz, wy, -wx, 0],
    ]


def mixing_matrix(l_w, c):
    """Map from rotor thrusts to ``[|f|, M_x, M_y, M_z]``."""
    h = l_w / 2.0
    return np.array([[1, 1, 1, 1], [0, -h, 0, h], [-h, 0, h, 0], [c, -c, c, -c]], dtype=float)


def quadrotor_rhs(x, u, lib, p):
    mass, g = p["m"], p["g"]
    Jd = p["J"]
    v, q, w = x[3:6], x[6:10], x[10:13]
    W = mixing_matrix(p["l_w"], p["c"])
    wrench = [sum(W[r, k] * u[k] for k in range(4)) for r in range(4)]
    thrust, Mt = wrench[0], wrench[1:]
    R = quat_to_dcm(q, lib)
    f = [R[i][2] * thrust for i in range(3)]
    gvec = [0.0, 0.0, -g]
    vdot = [(mass * gvec[i] + f[i]) / mass for i in range(3)]
    Om = omega_matrix(w)
    qdot = [0.5 * sum(Om[i][j] * q[j] for j in range(4)) for i in range(4)]
    Jw = [Jd[0] * w[0], Jd[1] * w[1], Jd[2] * w[2]]
    wxJw = [w[1] * Jw[2] - w[2] * Jw[1], w[2] * Jw[0] - w[0] * Jw[2], w[0] * Jw[1] - w[1] * Jw[0]]
    wdot = [(Mt[i] - wxJw[i]) / Jd[i] for i in range(3)]
    return list(v) + vdot + qdot + wdot


def quadrotor_post(xn, lib):
    q = xn[6:10]
    nrm = lib.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
    return list(xn[:6]) + [qi / nrm for qi in q] + list(xn[10:])


def quadrotor_cost_expr(x, u, lib, goal, cost):
    a1, a2, a3, a4 = cost["alpha"]
    R = quat_to_dcm(x[6:10], lib)
    Rg = quat_to_dcm([float(v) for v in goal[6:10]], np)
    tr = sum(Rg[k][i] * R[k][i] for i in range(3) for k in range(3))
    val = 0.5 * a1 * (3 - tr)
    val += a2 * sum((x[i] - goal[i]) ** 2 for i in range(3))
    val += a3 * sum((x[3 + i] - goal[3 + i]) ** 2 for i in range(3))
    val += a4 * sum((x[10 + i] - goal[10 + i]) ** 2 for i in range(3))
    r_u = cost.get("r_u", 0.0)
    if r_u:
        val += r_u * sum(ui**2 for ui in u)
    return val


# ---------------------------------------------------------------- registry

_CARTPOLE_P = {"m_c": 1.0, "m_p": 0.1, "l": 0.5, "g": 9.81}
_DEFAULTS = {
    "cartpole": dict(
        n=4, m=1, dt=0.05, params=_CARTPOLE_P, cost={"q": [1.0, 1.0, 0.3, 0.3], "R": 0.1},
        x0=[0.0, 0.6, 0.0, 0.0], action_scale=10.0,
    ),
    "cartpole_linear": dict(
        n=4, m=1, dt=0.05, params=_CARTPOLE_P, cost={"q": [1.0, 1.0, 0.3, 0.3], "R": 0.1},
        x0=[0.0, 0.6, 0.0, 0.0], action_scale=10.0,
    ),
    "robotarm": dict(
        n=4, m=2, dt=0.05, params={"m1": 1.0, "m2": 1.0, "l1": 1.0, "l2": 1.0, "g": 9.81},
        cost={"Q": np.diag([1.0, 1.0, 0.1, 0.1]).tolist(), "R": (0.01 * np.eye(2)).tolist()},
        x0=[0.5, -0.5, 0.0, 0.0], action_scale=10.0,
    ),
    "quadrotor": dict(
        n=13, m=4, dt=0.1,
        params={"m": 1.0, "g": 9.81, "J": [0.01, 0.01, 0.02], "l_w": 0.4, "c": 0.01},
        cost={"alpha": [1.0, 1.0, 0.1, 0.1], "r_u": 0.01},
        x_goal=[0.0] * 6 + [1.0, 0.0, 0.0, 0.0] + [0.0] * 3,
        x0=[1.0, -1.0, 0.5] + [0.0] * 3 + [1.0, 0.0, 0.0, 0.0] + [0.0] * 3,
        action_scale=5.0,
    ),
}
_RHS = {
    "cartpole": cartpole_rhs,
    "cartpole_linear": cartpole_linear_rhs,
    "robotarm": robotarm_rhs,
    "quadrotor": quadrotor_rhs,
}
_COST = {
    "cartpole": cartpole_cost_expr,
    "cartpole_linear": cartpole_cost_expr,
    "robotarm": arm_cost_expr,
    "quadrotor": quadrotor_cost_expr,
}


def default_spec(name, **overrides):
    if name not in _DEFAULTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    kw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in _DEFAULTS[name].items()}
    for key in ("params", "cost"):
        if key in overrides and overrides[key] is not None:
            kw[key] = {**kw[key], **overrides.pop(key)}
        overrides.pop(key, None)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return EnvSpec(name=name, **kw)


class Env:
    """A deterministic environment: pure ``step``, ``cost`` and symbolic true models."""

    def __init__(self, spec):
        self.spec = spec
        self._rhs = _RHS[spec.name]
        self._cost = _COST[spec.name]
        self._post = quadrotor_post if spec.name == "quadrotor" else None
        self._true_dyn = None
        self._true_cost = None

    @property
    def n(self):
        return self.spec.n

    @property
    def m(self):
        return self.spec.m

    @property
    def dt(self):
        return self.spec.dt

    @property
    def T(self):
        return self.spec.T

    def rhs(self, x, u):
        return np.asarray(self._rhs(list(x), list(u), np, self.spec.params), dtype=float)

    def step(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.size != self.n or u.size != self.m:
            raise DimensionMismatch(f"{self.spec.name} expects x in R^{self.n}, u in R^{self.m}")
        xn = x + self.dt * self.rhs(x, u)
        if self._post is not None:
            xn = np.asarray(self._post(list(xn), np), dtype=float)
        if not np.all(np.isfinite(xn)):
            raise NonFiniteEvaluation(f"{self.spec.name} step produced a non-finite state")
        return xn

    def step_state(self, s, u):
        return EnvState(self.step(s.x, u), s.t + 1)

    def cost(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.size != self.n or u.size != self.m:
            raise DimensionMismatch(f"{self.spec.name} cost expects x in R^{self.n}, u in R^{self.m}")
        return float(self._cost(list(x), list(u), np, list(self.spec.goal()), self.spec.cost))

    def terminal_cost(self, x):
        return 0.0

    def true_dynamics(self):
        if self._true_dyn is None:
            p = self.spec.params
            self._true_dyn = SymbolicDynamics(
                lambda xs, us, lib: self._rhs(xs, us, lib, p), self.n, self.m, self.dt,
                name=self.spec.name, post=self._post,
            )
        return self._true_dyn

    def true_cost_model(self):
        if self._true_cost is None:
            goal = list(self.spec.goal())
            self._true_cost = SymbolicCost(
                lambda xs, us, lib: self._cost(xs, us, lib, goal, self.spec.cost), self.n, self.m,
                name=self.spec.name,
            )
        return self._true_cost

    def true_model(self, H):
        return PolicyModel(self.true_cost_model(), ZeroTerminalCost(self.n), self.true_dynamics(), H)

    def initial_state(self):
        return EnvState(self.spec.initial(), 0)


def make_env(name, dt=None, **overrides):
    """Environment by registry name with optional spec overrides."""
    return Env(default_spec(name, dt=dt, **overrides))


def cartpole_step(s, F, spec):
    return Env(spec).step_state(s, np.atleast_1d(F))


def robotarm_step(s, u, spec):
    M, _, _ = arm_matrices(s.x[:2], s.x[2:], np, spec.params)
    if abs(np.linalg.det(np.asarray(M, float))) < 1e-12:
        raise SingularMatrix("arm inertia matrix is singular")
    return Env(spec).step_state(s, u)


def quadrotor_step(s, thrusts, spec):
    return Env(spec).step_state(s, thrusts)


def true_cost(env, x, u):
    return env.cost(x, u)


def simulate(env, x0, actions):
    """Open-loop rollout; returns ``(states (T+1, n), total cost)``."""
    xs = [np.asarray(x0, float)]
    total = 0.0
    for u in np.asarray(actions, float).reshape(-1, env.m):
        total += env.cost(xs[-1], u)
        xs.append(env.step(xs[-1], u))
    total += env.terminal_cost(xs[-1])
    return np.asarray(xs), total


def optimal_plan(env, T=None, cfg=None, x0=None):
    """Full-horizon plan on the true model; returns the :class:`PlanSolution`."""
    from .exceptions import SolverFailure
    from .ocp import SolverCfg, solve_plan

    T = env.T if T is None else int(T)
    x0 = env.spec.initial() if x0 is None else np.asarray(x0, float)
    cfg = cfg or SolverCfg(max_iters=500)
    plan = solve_plan(env.true_model(T), np.zeros(0), x0, None, cfg)
    if not plan.converged:
        raise SolverFailure(f"optimal baseline solve did not converge: {plan.message}", k=-1, n=-1, t=0)
    return plan


def optimal_baseline(env, T=None, cfg=None, x0=None):
    """Realized total cost of the true-model open-loop optimal plan."""
    plan = optimal_plan(env, T, cfg, x0)
    _, total = simulate(env, plan.x_init, plan.actions)
    return float(total)


def random_input_data(env, n_traj=20, T=None, rng=None, scale=None):
    """Trajectories under uniform random inputs in ``[-scale, scale]``.

    Returns ``(X, U, Xn)`` transition arrays for model fitting.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    T = env.T if T is None else T
    scale = env.spec.action_scale if scale is None else scale
    X, U, Xn = [], [], []
    for _ in range(n_traj):
        x = env.spec.initial()
        for _ in range(T):
            u = rng.uniform(-scale, scale, size=env.m)
            xn = env.step(x, u)
            X.append(x)
            U.append(u)
            Xn.append(xn)
            x = xn
    return np.asarray(X), np.asarray(U), np.asarray(Xn)


def linear_reference_lqr(env, T=None, x0=None):
    """Finite-horizon discrete Riccati cost for ``cartpole_linear`` (oracle for tests)."""
    if env.spec.name != "cartpole_linear":
        raise ConfigError("Riccati reference only defined for cartpole_linear")
    p, dt = env.spec.params, env.dt
    mc, mp, l, g = p["m_c"], p["m_p"], p["l"], p["g"]
    Ac = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [0, mp * g / mc, 0, 0], [0, -(mc + mp) * g / (l * mc), 0, 0]])
    Bc = np.array([[0], [0], [1 / mc], [-1 / (l * mc)]])
    A, B = np.eye(4) + dt * Ac, dt * Bc
    q = np.asarray(env.spec.cost["q"], float)
    Q, R = np.diag(q * q), np.array([[env.spec.cost["R"]]])
    T = env.T if T is None else T
    x0 = env.spec.initial() if x0 is None else np.asarray(x0, float)
    goal = env.spec.goal()
    P = np.zeros((4, 4))
    for _ in range(T):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
    dx = x0 - goal
    return float(dx @ P @ dx)

