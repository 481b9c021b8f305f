"""Model specifications, the composite planning model and parameter packing."""

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..exceptions import ConfigError, DimensionMismatch
from .costs import IcnnCost, QuadraticCost, QuadraticTerminalCost, ZeroTerminalCost
from .dynamics import IcnnResidualDynamics, LinearEulerDynamics

COST_KINDS = ("quadratic", "icnn")
DYNAMICS_KINDS = ("linear_euler", "icnn_residual", "analytic")
TERMINAL_KINDS = ("quadratic", "zero")


@dataclass
class ModelSpec:
    """Declarative description of the planning model.

    ``dt`` is in seconds; ``x_goal`` defaults to the origin. ``env`` names
    the environment whose true dynamics back ``dynamics_kind="analytic"``.
    """

    n: int
    m: int
    H: int = 3
    cost_kind: str = "quadratic"
    dynamics_kind: str = "linear_euler"
    dt: float = 0.05
    icnn_widths: tuple = (4,)
    terminal_kind: str = "quadratic"
    x_goal: Optional[list] = None
    env: Optional[str] = None

    def __post_init__(self):
        self.icnn_widths = tuple(int(w) for w in self.icnn_widths)
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be positive")
        if self.H < 1:
            raise ConfigError("planning horizon H must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.cost_kind not in COST_KINDS:
            raise ConfigError(f"cost_kind must be one of {COST_KINDS}")
        if self.dynamics_kind not in DYNAMICS_KINDS:
            raise ConfigError(f"dynamics_kind must be one of {DYNAMICS_KINDS}")
        if self.terminal_kind not in TERMINAL_KINDS:
            raise ConfigError(f"terminal_kind must be one of {TERMINAL_KINDS}")
        if not self.icnn_widths or min(self.icnn_widths) < 1:
            raise ConfigError("icnn_widths must be positive")
        if self.x_goal is not None:
            self.x_goal = [float(v) for v in self.x_goal]
            if len(self.x_goal) != self.n:
                raise ConfigError(f"x_goal must have length n={self.n}")

    def to_dict(self):
        d = asdict(self)
        d["icnn_widths"] = list(self.icnn_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PolicyParams:
    theta_c: np.ndarray
    theta_H: np.ndarray
    theta_f: np.ndarray

    @property
    def flat(self):
        return np.concatenate([self.theta_c, self.theta_H, self.theta_f])

    @property
    def d(self):
        return self.theta_c.size + self.theta_H.size + self.theta_f.size


class PolicyModel:
    """Stage cost, terminal cost and dynamics used inside the planner.

    The flat parameter vector is ordered ``theta_c | theta_H | theta_f``.
    """

    def __init__(self, stage, terminal, dynamics, H, spec=None):
        if not (stage.n == terminal.n == dynamics.n) or stage.m != dynamics.m:
            raise DimensionMismatch("cost and dynamics dimensions disagree")
        if H < 1:
            raise ConfigError("planning horizon H must be >= 1")
        self.stage, self.terminal, self.dynamics = stage, terminal, dynamics
        self.H = int(H)
        self.n, self.m = dynamics.n, dynamics.m
        self.spec = spec
        pc, ph, pf = stage.n_params, terminal.n_params, dynamics.n_params
        self.sl_c = slice(0, pc)
        self.sl_H = slice(pc, pc + ph)
        self.sl_f = slice(pc + ph, pc + ph + pf)
        self.d = pc + ph + pf

    def split(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.d:
            raise DimensionMismatch(f"theta has length {theta.size}, model expects {self.d}")
        return theta[self.sl_c], theta[self.sl_H], theta[self.sl_f]

    def unpack(self, flat):
        c, h, f = self.split(flat)
        return PolicyParams(c.copy(), h.copy(), f.copy())

    def pack(self, theta_c, theta_H, theta_f):
        parts = [np.asarray(a, float).reshape(-1) for a in (theta_c, theta_H, theta_f)]
        sizes = (self.stage.n_params, self.terminal.n_params, self.dynamics.n_params)
        for name, a, s in zip(("theta_c", "theta_H", "theta_f"), parts, sizes):
            if a.size != s:
                raise DimensionMismatch(f"{name} has length {a.size}, expected {s}")
        return np.concatenate(parts)

    def stage_cost(self, theta_c, x, u):
        return self.stage.value(theta_c, x, u)

    def stage_cost_derivs(self, theta_c, x, u):
        return self.stage.derivs(theta_c, x, u)

    def terminal_cost(self, theta_H, x):
        return self.terminal.value(theta_H, x)

    def terminal_cost_derivs(self, theta_H, x):
        return self.terminal.derivs(theta_H, x)

    def dynamics_step(self, theta_f, x, u):
        return self.dynamics.step(theta_f, x, u)

    def dynamics_derivs(self, theta_f, x, u):
        return self.dynamics.derivs(theta_f, x, u)


def build_model(spec):
    """Instantiate the :class:`PolicyModel` described by a :class:`ModelSpec`."""
    n, m = spec.n, spec.m
    goal = spec.x_goal
    if spec.cost_kind == "quadratic":
        stage = QuadraticCost(n, m, goal)
    else:
        stage = IcnnCost(n, m, spec.icnn_widths, goal)
    terminal = QuadraticTerminalCost(n, goal) if spec.terminal_kind == "quadratic" else ZeroTerminalCost(n)
    if spec.dynamics_kind == "linear_euler":
        dyn = LinearEulerDynamics(n, m, spec.dt)
    elif spec.dynamics_kind == "icnn_residual":
        dyn = IcnnResidualDynamics(n, m, spec.dt, spec.icnn_widths)
    else:
        from ..envs import make_env

        if spec.env is None:
            raise ConfigError("dynamics_kind='analytic' needs spec.env")
        env = make_env(spec.env, dt=spec.dt)
        dyn = env.true_dynamics()
    return PolicyModel(stage, terminal, dyn, spec.H, spec=spec)


def pack_params(theta_c, theta_H, theta_f):
    return np.concatenate([np.asarray(a, float).reshape(-1) for a in (theta_c, theta_H, theta_f)])


def unpack_params(flat, spec):
    model = spec if isinstance(spec, PolicyModel) else build_model(spec)
    return model.unpack(flat)


def _fmt(obj):
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            raise ValueError("cannot serialize non-finite float")
        return format(float(obj), ".17g")
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in obj.items()) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_17g(obj):
    """JSON text where every float is rendered with 17 significant digits."""
    return _fmt(obj)


def params_to_json(params, spec):
    if not isinstance(params, PolicyParams):
        params = build_model(spec).unpack(params)
    return dumps_17g({
        "theta_c": params.theta_c, "theta_H": params.theta_H, "theta_f": params.theta_f,
        "spec": spec.to_dict(),
    })


def params_from_json(text):
    doc = json.loads(text)
    extra = set(doc) - {"theta_c", "theta_H", "theta_f", "spec"}
    if extra:
        raise ConfigError(f"unknown keys in parameter document: {sorted(extra)}")
    spec = ModelSpec.from_dict(doc["spec"])
    model = build_model(spec)
    flat = model.pack(doc["theta_c"], doc["theta_H"], doc["theta_f"])
    return model.unpack(flat), spec
