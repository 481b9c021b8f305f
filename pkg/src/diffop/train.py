"""Policy-gradient training of the optimization-based policy.

Each iteration collects ``N`` episodes with the truncated Gaussian policy,
forms the REINFORCE estimate::

    g = (1/N) sum_n L(tau_n) sum_t G_t' (u_t - u*_t) / sigma^2

with ``G_t = d u*_t / d theta`` from implicit differentiation, and takes
one plain gradient step ``theta <- theta - eta g``.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.optimize

from .exceptions import (
    ConfigError,
    DiffOPError,
    DomainError,
    NoValidTrajectories,
    SolverFailure,
)
from .implicit import policy_jacobian
from .models import LinearEulerDynamics, ModelSpec, build_model, params_to_json
from .ocp import SolverCfg, shift_warm_start, solve_plan, unrolled_derivs, with_warm_start
from .policy import StochasticCfg, rollout_rng, sample_action

logger = logging.getLogger(__name__)

TRAINABLE = ("all", "cost", "dynamics")


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    actions: np.ndarray  # (T, m)
    plan_means: np.ndarray  # (T, m)
    jacobians: np.ndarray  # (T, m, d)
    costs: np.ndarray  # (T,)
    terminal_cost: float = 0.0
    k: int = 0
    n: int = 0

    @property
    def T(self):
        return self.actions.shape[0]

    @property
    def total_cost(self):
        return float(np.sum(self.costs) + self.terminal_cost)


@dataclass
class TrainCfg:
    """Training configuration.

    ``stochastic=None`` rolls out the deterministic policy (``u = u*``).
    ``init`` is ``"identity"`` (unit cost weights, zero dynamics before
    fitting) or an explicit flat parameter vector. ``trainable`` selects
    the parameter blocks that receive gradient steps: ``"all"``, ``"cost"``
    (stage and terminal cost) or ``"dynamics"``.
    """

    spec: ModelSpec
    env: str = "cartpole"
    K: int = 100
    N: int = 10
    eta: float = 1e-3
    T: Optional[int] = None
    stochastic: Optional[StochasticCfg] = None
    solver: SolverCfg = field(default_factory=SolverCfg)
    constraints: object = None
    init: object = "identity"
    fit_dynamics: bool = True
    n_fit_traj: int = 20
    fit_seed: int = 0
    baseline: bool = False
    warm_start: bool = True
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 10
    threads: Optional[int] = None
    record_wall_time: bool = True
    final_eval: bool = True
    trainable: str = "all"

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.T is not None and self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.eta >= 0:
            raise ConfigError("eta must be nonnegative")
        if self.trainable not in TRAINABLE:
            raise ConfigError(f"trainable must be one of {TRAINABLE}")


@dataclass
class IterationRecord:
    k: int
    mean_cost: float
    p20: float
    p80: float
    grad_norm: float
    wall_time_s: float
    n_valid: int = 0
    n_failed: int = 0


@dataclass
class TrainResult:
    records: List[IterationRecord]
    theta: np.ndarray
    theta0: np.ndarray
    model: object
    final: Optional[IterationRecord] = None
    history: list = field(default_factory=list)


def _threads(cfg_threads=None):
    if cfg_threads is not None:
        return max(1, int(cfg_threads))
    env = os.environ.get("DIFFOP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError("DIFFOP_THREADS must be an integer") from exc
    return os.cpu_count() or 1


def rollout(env, model, theta, cfg, k=0, n=0, x0=None):
    """One episode of the policy on the true environment.

    Raises :class:`SolverFailure` tagged with ``(k, n, t)`` when a plan
    fails to converge.
    """
    T = cfg.T or env.T
    theta = np.asarray(theta, dtype=float)
    x = env.spec.initial() if x0 is None else np.asarray(x0, float)
    m, d = model.m, model.d
    xs = np.empty((T + 1, model.n))
    us = np.empty((T, m))
    ms = np.empty((T, m))
    Gs = np.empty((T, m, d))
    cs = np.empty(T)
    xs[0] = x
    warm = None
    st = cfg.stochastic
    for t in range(T):
        scfg = with_warm_start(cfg.solver, warm) if cfg.warm_start else cfg.solver
        try:
            plan = solve_plan(model, theta, x, cfg.constraints, scfg)
        except DiffOPError as exc:
            raise SolverFailure(f"{type(exc).__name__}: {exc}", k, n, t) from exc
        if not plan.converged:
            raise SolverFailure(f"plan did not converge ({plan.message})", k, n, t)
        try:
            G = policy_jacobian(model, theta, x, plan, cfg.constraints)
        except DiffOPError as exc:
            raise SolverFailure(f"policy Jacobian: {type(exc).__name__}: {exc}", k, n, t) from exc
        u_star = plan.u0
        u = u_star if st is None else sample_action(u_star, st, rollout_rng(st.seed, k, n, t))
        ms[t], us[t], Gs[t] = u_star, u, G
        cs[t] = env.cost(x, u)
        x = env.step(x, u)
        xs[t + 1] = x
        warm = shift_warm_start(plan.actions)
    return Trajectory(xs, us, ms, Gs, cs, env.terminal_cost(x), k, n)


def collect(env, model, theta, cfg, k):
    """``cfg.N`` rollouts at iteration ``k``; returns ``(valid, n_failed)`` in index order."""

    def one(n):
        try:
            return rollout(env, model, theta, cfg, k, n)
        except SolverFailure as exc:
            logger.warning("excluding trajectory: %s", exc)
            return exc

    workers = min(_threads(cfg.threads), cfg.N)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(cfg.N)))
    else:
        out = [one(n) for n in range(cfg.N)]
    valid = [o for o in out if isinstance(o, Trajectory)]
    return valid, len(out) - len(valid)


def trajectory_score(traj, sigma):
    """``sum_t G_t' (u_t - u*_t) / sigma^2`` for one episode."""
    r = traj.actions - traj.plan_means
    return np.einsum("tmd,tm->d", traj.jacobians, r) / (sigma * sigma)


def estimate_gradient(trajs, sigma, baseline=False):
    """REINFORCE estimate, an ordered mean over the valid trajectories."""
    trajs = [t for t in trajs if t is not None]
    if not trajs:
        raise NoValidTrajectories("no valid trajectories to estimate the gradient")
    L = np.array([t.total_cost for t in trajs])
    if baseline:
        L = L - L.mean()
    g = np.zeros(trajs[0].jacobians.shape[2])
    for Li, tr in zip(L, trajs):
        g += Li * trajectory_score(tr, sigma)
    return g / len(trajs)


def identity_init(model):
    """Unit cost weights and zero dynamics parameters."""
    th = np.zeros(model.d)
    st = model.stage
    if hasattr(st, "params_from_weights"):
        th[model.sl_c] = st.params_from_weights(np.ones(model.n), np.eye(model.m))
    else:
        rng = np.random.default_rng(0)
        th[model.sl_c] = st.net.layout.init_params(rng) if hasattr(st, "net") else 0.0
    if model.terminal.n_params:
        th[model.sl_H] = 1.0
    return th


def fit_dynamics(model, X, U, Xn, theta_f0=None):
    """Least-squares fit of the dynamics parameters to observed transitions."""
    dyn = model.dynamics
    if dyn.n_params == 0:
        return np.zeros(0)
    if isinstance(dyn, LinearEulerDynamics):
        V = np.hstack([X, U])
        Th, *_ = np.linalg.lstsq(V, (Xn - X) / dyn.dt, rcond=None)
        return Th.reshape(-1)
    p0 = np.zeros(dyn.n_params) if theta_f0 is None else np.asarray(theta_f0, float)

    def resid(p):
        return np.concatenate([dyn.step(p, x, u) - xn for x, u, xn in zip(X, U, Xn)])

    def jac(p):
        return np.vstack([dyn.derivs(p, x, u).f_theta for x, u in zip(X, U)])

    sol = scipy.optimize.least_squares(resid, p0, jac=jac, method="trf", max_nfev=200)
    return sol.x


def initial_theta(env, model, cfg):
    if isinstance(cfg.init, str):
        if cfg.init != "identity":
            raise ConfigError(f"unknown init scheme {cfg.init!r}")
        th = identity_init(model)
        if model.dynamics.n_params and hasattr(model.dynamics, "net"):
            th[model.sl_f] = model.dynamics.net.layout.init_params(np.random.default_rng(cfg.fit_seed))
    else:
        th = np.asarray(cfg.init, float).copy()
        if th.size != model.d:
            raise ConfigError(f"init has length {th.size}, model expects {model.d}")
    if cfg.fit_dynamics and model.dynamics.n_params:
        from .envs import random_input_data

        X, U, Xn = random_input_data(env, cfg.n_fit_traj, cfg.T or env.T, np.random.default_rng(cfg.fit_seed))
        th[model.sl_f] = fit_dynamics(model, X, U, Xn, th[model.sl_f])
    return th


def _record(k, trajs, n_failed, g, t0, cfg):
    L = np.array([t.total_cost for t in trajs])
    return IterationRecord(
        k=k, mean_cost=float(L.mean()), p20=float(np.percentile(L, 20)), p80=float(np.percentile(L, 80)),
        grad_norm=float(np.linalg.norm(g)) if g is not None else float("nan"),
        wall_time_s=float(time.perf_counter() - t0) if cfg.record_wall_time else 0.0,
        n_valid=len(trajs), n_failed=n_failed,
    )


def _checkpoint(cfg, model, theta, tag):
    if not cfg.checkpoint_dir:
        return
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.checkpoint_dir, f"theta_{tag}.json")
    with open(path, "w", newline="\n") as fh:
        fh.write(params_to_json(model.unpack(theta), model.spec) + "\n")


def trainable_mask(model, which):
    mask = np.zeros(model.d, dtype=bool)
    if which in ("all", "cost"):
        mask[model.sl_c] = mask[model.sl_H] = True
    if which in ("all", "dynamics"):
        mask[model.sl_f] = True
    return mask


def train(env, cfg, theta0=None, model=None, callback=None):
    """Run ``cfg.K`` gradient steps; returns a :class:`TrainResult`.

    Aborts with :class:`NoValidTrajectories` when more than half of an
    iteration's rollouts fail.
    """
    if cfg.stochastic is None and cfg.K > 0 and cfg.eta > 0:
        raise ConfigError("training needs a stochastic policy (sigma > 0)")
    model = model or build_model(cfg.spec)
    theta = initial_theta(env, model, cfg) if theta0 is None else np.asarray(theta0, float).copy()
    theta0 = theta.copy()
    records, history = [], [theta.copy()]
    t0 = time.perf_counter()
    sigma = cfg.stochastic.sigma if cfg.stochastic else 1.0
    mask = trainable_mask(model, cfg.trainable)
    for k in range(cfg.K):
        trajs, n_failed = collect(env, model, theta, cfg, k)
        if n_failed * 2 > cfg.N:
            raise NoValidTrajectories(f"iteration {k}: {n_failed} of {cfg.N} rollouts failed")
        g = np.where(mask, estimate_gradient(trajs, sigma, cfg.baseline), 0.0)
        rec = _record(k, trajs, n_failed, g, t0, cfg)
        records.append(rec)
        if callback is not None:
            callback(rec, theta)
        theta = theta - cfg.eta * g
        history.append(theta.copy())
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            _checkpoint(cfg, model, theta, f"k{k + 1:04d}")
    final = None
    if cfg.final_eval:
        trajs, n_failed = collect(env, model, theta, cfg, cfg.K)
        if not trajs:
            raise NoValidTrajectories("final evaluation produced no valid trajectories")
        final = _record(cfg.K, trajs, n_failed, None, t0, cfg)
    _checkpoint(cfg, model, theta, "final")
    return TrainResult(records, theta, theta0, model, final, history)


# ------------------------------------------------------------ theory


@dataclass(frozen=True)
class TheoryConstants:
    L_C: float
    eta_rec: float
    mu: float
    L1: float
    M: float
    m: int
    beta: float
    T: int

    def N_of(self, eps, K, d, nu):
        """Trajectories per step for accuracy ``eps`` with probability ``1 - nu`` over ``K`` steps."""
        if not eps > 0 or K < 1 or d < 1:
            raise DomainError("need eps > 0, K >= 1, d >= 1")
        if not 0 < nu < 1:
            raise DomainError("nu must lie in (0, 1)")
        c = 2 * self.m * self.beta**2 * self.M**2 * self.T**2 * self.L1**2 / (eps**2 * self.mu**2)
        return float(c * np.log(2 * K * d / nu))


def theory_constants(mu, L1, L2, L3, M, m, beta, sigma, T):
    """Smoothness constant ``L_C`` and the recommended step ``1 / (4 L_C)``."""
    vals = dict(mu=mu, L1=L1, L2=L2, L3=L3, M=M, m=m, beta=beta, sigma=sigma, T=T)
    bad = [k for k, v in vals.items() if not (np.isfinite(v) and v > 0)]
    if bad:
        raise DomainError(f"constants must be positive and finite: {bad}")
    t1 = np.sqrt(m) * beta * T * (L2 * mu**2 + L1 * L2 * mu + L1 * L3 * mu + L1**2 * L3) / mu**3
    t2 = L1**2 * T / (mu**2 * sigma**2)
    t3 = m * beta**2 * L1**2 * T**2 / mu**2
    L_C = float(M * (t1 + t2 + t3))
    return TheoryConstants(L_C, 1.0 / (4.0 * L_C), float(mu), float(L1), float(M), int(m), float(beta), int(T))


def measure_constants(model, theta, states, constraints=None, cfg=None):
    """Empirical ``mu`` (min Hessian eigenvalue) and ``L1`` (max cross-derivative norm)
    of the unrolled cost at the plans for the given states."""
    mu, L1 = np.inf, 0.0
    for x in np.atleast_2d(states):
        plan = solve_plan(model, theta, x, constraints, cfg)
        ud = unrolled_derivs(model, theta, x, plan.u_seq, order=2, with_theta=True)
        mu = min(mu, float(np.linalg.eigvalsh(ud.hess)[0]))
        L1 = max(L1, float(np.linalg.norm(ud.cross, 2)))
    return mu, L1
