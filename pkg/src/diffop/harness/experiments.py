"""Experiment bodies behind the CLI commands.

Each function takes a validated config and returns plain data; the CLI
layer turns that into files, printed lines and exit codes.
"""

import json
import os

import numpy as np

from ..envs import make_env, optimal_baseline
from ..exceptions import ConfigError
from ..implicit import crosscheck
from ..models import (
    DiagonalQuadraticCost,
    LinearDynamics,
    ModelSpec,
    PolicyModel,
    ZeroTerminalCost,
    build_model,
    params_from_json,
)
from ..ocp import ConstraintSpec, SolverCfg, solve_plan, unrolled_derivs
from ..policy import StochasticCfg
from ..train import TrainCfg, initial_theta, measure_constants, rollout, theory_constants, train
from .io import record_row

# ------------------------------------------------------------ shared builders


def build_env(ec):
    kw = {}
    if ec.x0 is not None:
        kw["x0"] = ec.x0
    if ec.T is not None:
        kw["T"] = ec.T
    return make_env(ec.name, dt=ec.dt, params=dict(ec.params), cost=dict(ec.cost), **kw)


def model_spec(env, pc):
    return ModelSpec(
        n=env.n, m=env.m, H=pc.H, cost_kind=pc.cost_kind, dynamics_kind=pc.dynamics_kind,
        dt=env.dt, icnn_widths=tuple(pc.icnn_widths), terminal_kind=pc.terminal_kind,
        x_goal=[float(v) for v in env.spec.goal()], env=env.spec.name,
    )


def box_constraints(m, bound):
    if bound is None:
        return None
    return ConstraintSpec(u_lower=-bound * np.ones(m), u_upper=bound * np.ones(m))


def policy_sigma(pc, env):
    return 0.1 * float(env.spec.action_scale) if pc.sigma is None else float(pc.sigma)


def stochastic_cfg(pc, env, seed):
    sigma = policy_sigma(pc, env)
    if sigma == 0:
        return None
    return StochasticCfg(sigma=sigma, beta=pc.beta, seed=seed, half_width_mode=pc.half_width_mode)


def train_cfg(cfg, env, seed, out_dir=None):
    pc = cfg.planner
    return TrainCfg(
        spec=model_spec(env, pc), env=env.spec.name, K=cfg.K, N=cfg.N, eta=cfg.eta,
        stochastic=stochastic_cfg(cfg.policy, env, seed),
        solver=SolverCfg(grad_tol=pc.grad_tol, max_iters=pc.max_iters),
        constraints=box_constraints(env.m, pc.u_bound), fit_dynamics=cfg.fit_dynamics,
        n_fit_traj=cfg.n_fit_traj, fit_seed=seed, baseline=cfg.baseline, threads=cfg.threads,
        record_wall_time=cfg.record_wall_time, checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=out_dir, trainable=cfg.trainable,
    )


# ------------------------------------------------------------ train


def run_train(cfg, out_dir):
    """Train ``cfg.repeats`` seeds ``seed, seed+1, ...``.

    Returns ``(per_seed, aggregate_rows, optimal)`` where ``per_seed`` maps
    seed to its :class:`TrainResult`.
    """
    env = build_env(cfg.env)
    per_seed = {}
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        ck = os.path.join(out_dir, f"checkpoints_seed{seed}") if out_dir and cfg.checkpoint_every else None
        per_seed[seed] = train(env, train_cfg(cfg, env, seed, ck))
    opt = optimal_baseline(env, T=cfg.env.T)
    return per_seed, aggregate(per_seed, opt), opt


def aggregate(per_seed, optimal):
    """Mean and 20/80 percentiles across seeds of each iteration's mean cost."""
    results = list(per_seed.values())
    rows = []
    K = min(len(r.records) for r in results)
    for k in range(K):
        recs = [r.records[k] for r in results]
        rows.append(_agg_row(str(k), recs))
    finals = [r.final for r in results if r.final is not None]
    if len(finals) == len(results):
        rows.append(_agg_row("final", finals))
    rows.append(["optimal", optimal, optimal, optimal, float("nan"), 0.0])
    return rows


def _agg_row(label, recs):
    c = np.array([r.mean_cost for r in recs])
    g = np.array([r.grad_norm for r in recs])
    w = np.array([r.wall_time_s for r in recs])
    return [label, c.mean(), np.percentile(c, 20), np.percentile(c, 80), g.mean(), w.mean()]


def seed_rows(result):
    rows = [record_row(r) for r in result.records]
    if result.final is not None:
        rows.append(record_row(result.final, "final"))
    return rows


# ------------------------------------------------------------ gradcheck


def _random_lqr(rng, gc):
    n = int(rng.integers(1, gc.n_max + 1))
    m = int(rng.integers(1, gc.m_max + 1))
    spec = ModelSpec(n=n, m=m, H=gc.H, dt=0.1)
    model = build_model(spec)
    theta = 0.5 * rng.normal(size=model.d)
    theta[model.sl_c] = rng.normal(size=model.sl_c.stop - model.sl_c.start)
    return spec, theta, rng.normal(size=n), None


def _random_cartpole_icnn(rng, gc):
    spec = ModelSpec(
        n=4, m=1, H=gc.H, cost_kind="icnn", dynamics_kind="icnn_residual", dt=0.05, icnn_widths=(4,)
    )
    model = build_model(spec)
    theta = np.zeros(model.d)
    theta[model.sl_c] = model.stage.net.layout.init_params(rng, scale=0.5, z_offset=-1.0)
    theta[model.sl_H] = 1.0 + rng.random(model.sl_H.stop - model.sl_H.start)
    theta[model.sl_f] = model.dynamics.net.layout.init_params(rng, scale=0.5, z_offset=-1.0)
    return spec, theta, 0.5 * rng.normal(size=4), None


def _random_boxed_lqr(rng, gc):
    spec, theta, x, _ = _random_lqr(rng, gc)
    return spec, theta, 3.0 * x, box_constraints(spec.m, gc.box)


FAMILIES = {"lqr": _random_lqr, "cartpole-icnn": _random_cartpole_icnn, "boxed-lqr": _random_boxed_lqr}


def gradcheck_instance(spec, theta, x_init, constraints, gc):
    """Crosscheck all routes on one instance; returns ``(report, ok)``."""
    model = build_model(spec)
    scfg = SolverCfg(grad_tol=gc.grad_tol, max_iters=500)
    plan = solve_plan(model, theta, x_init, constraints, scfg)
    rep = crosscheck(model, theta, x_init, plan, constraints, fd_cfg=scfg, fd_h=gc.fd_h, full=True, floor=gc.floor)
    ok = not rep.unreliable and "fd" in rep.routes and len(rep.routes) >= 2
    for pair, err in rep.pairwise.items():
        tol = gc.tol_fd if "fd" in pair.split("|") else gc.tol_analytic
        ok = ok and err <= tol
    return rep, ok


def instance_doc(family, trial, spec, theta, x_init, constraints):
    doc = {"family": family, "trial": trial, "spec": spec.to_dict(), "theta": theta, "x_init": x_init}
    if constraints is not None:
        doc["u_lower"], doc["u_upper"] = constraints.u_lower, constraints.u_upper
    return doc


def instance_from_doc(doc):
    spec = ModelSpec.from_dict(doc["spec"])
    cons = None
    if "u_lower" in doc:
        cons = ConstraintSpec(u_lower=np.asarray(doc["u_lower"], float), u_upper=np.asarray(doc["u_upper"], float))
    return spec, np.asarray(doc["theta"], float), np.asarray(doc["x_init"], float), cons


def load_replay(path):
    """Instances from a failure file written by a previous gradcheck run."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read replay file {path}: {exc}") from exc
    docs = doc.get("failures", [doc]) if isinstance(doc, dict) else doc
    try:
        return [(d.get("trial", i), *instance_from_doc(d)) for i, d in enumerate(docs)]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed replay file {path}: {exc}") from exc


def _generated(gc):
    rng = np.random.default_rng(gc.seed)
    gen = FAMILIES[gc.family]
    for trial in range(gc.trials):
        yield (trial, *gen(rng, gc))


def run_gradcheck(gc):
    """Returns ``(worst, failures)``: worst error per pair and failing instances.

    With ``gc.replay`` set, the recorded instances are re-run instead of
    drawing ``gc.trials`` new ones.
    """
    instances = load_replay(gc.replay) if gc.replay else _generated(gc)
    worst, failures = {}, []
    for trial, spec, theta, x, cons in instances:
        rep, ok = gradcheck_instance(spec, theta, x, cons, gc)
        for pair, err in rep.pairwise.items():
            worst[pair] = max(worst.get(pair, 0.0), err)
        if not ok:
            doc = instance_doc(gc.family, trial, spec, theta, x, cons)
            doc["report"] = {"pairwise": rep.pairwise, "notes": rep.notes, "unreliable": rep.unreliable}
            failures.append(doc)
    return worst, failures


# ------------------------------------------------------------ nonconvexity

NONCONVEX_THETA1 = np.array([1.0, 1.0, 2.0, -0.5])
NONCONVEX_THETA2 = np.array([2.0, 1.0, 2.0, -0.5])
NONCONVEX_ALPHA = 0.5
NONCONVEX_T = 6
NONCONVEX_X1 = 5.0


def nonconvex_model():
    """Scalar planner: cost ``t1 x^2 + t2 u^2``, dynamics ``x' = t3 x + t4 u``, no terminal cost."""
    return PolicyModel(DiagonalQuadraticCost(1, 1), ZeroTerminalCost(1), LinearDynamics(1, 1), NONCONVEX_T)


def nonconvex_cost(theta, model=None):
    """Cost of playing the policy's plan from ``x = 5`` on ``x' = x - 0.5 u``.

    The full ``T``-step plan is computed once and applied open loop; the
    realized cost is ``sum_t x_t^2 + u_t^2``.
    """
    model = model or nonconvex_model()
    plan = solve_plan(model, np.asarray(theta, float), [NONCONVEX_X1], None, SolverCfg(grad_tol=1e-12))
    if not plan.converged:
        raise ConfigError(f"nonconvexity plan did not converge: {plan.message}")
    x, c = NONCONVEX_X1, 0.0
    for u in plan.actions[:, 0]:
        c += x * x + u * u
        x = x - 0.5 * u
    return float(c)


def run_nonconvexity():
    a = NONCONVEX_ALPHA
    mid = a * NONCONVEX_THETA1 + (1 - a) * NONCONVEX_THETA2
    c1, c2, cm = (nonconvex_cost(t) for t in (NONCONVEX_THETA1, NONCONVEX_THETA2, mid))
    chord = a * c1 + (1 - a) * c2
    return {
        "theta1": NONCONVEX_THETA1, "theta2": NONCONVEX_THETA2, "theta_mid": mid, "alpha": a,
        "C_theta1": c1, "C_theta2": c2, "C_mid": cm, "chord": chord, "violated": bool(cm > chord),
    }


# ------------------------------------------------------------ theory


def measure_lqr(mc, seed):
    """Random LQR planner; returns measured and analytic constants."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(n=mc.n, m=mc.m, H=mc.H, dt=0.1)
    model = build_model(spec)
    theta = 0.5 * rng.normal(size=model.d)
    theta[model.sl_c] = rng.normal(size=model.sl_c.stop - model.sl_c.start)
    states = rng.normal(size=(mc.samples, mc.n))
    mu_hat, L1_hat = measure_constants(model, theta, states)
    # Hessian of a quadratic cost under linear dynamics does not depend on x or u
    H_exact = unrolled_derivs(model, theta, np.zeros(mc.n), np.zeros(mc.m * mc.H), order=2, with_theta=False).hess
    mu_exact = float(np.linalg.eigvalsh(H_exact)[0])
    return {"mu_hat": mu_hat, "L1_hat": L1_hat, "mu_exact": mu_exact, "d": model.d}


def run_theory(tc):
    mu, L1 = tc.mu, tc.L1
    out = {}
    if tc.measure:
        meas = measure_lqr(tc.measure_cfg, tc.seed)
        out.update(meas)
        mu, L1 = meas["mu_hat"], meas["L1_hat"]
    consts = theory_constants(mu, L1, tc.L2, tc.L3, tc.M, tc.m, tc.beta, tc.sigma, tc.T)
    out.update({
        "mu": mu, "L1": L1, "L_C": consts.L_C, "eta_rec": consts.eta_rec,
        "N": consts.N_of(tc.eps, tc.K, tc.d, tc.nu),
    })
    return out


# ------------------------------------------------------------ rollout


def run_rollout(rc):
    """One episode; returns the JSON-lines documents (steps then summary)."""
    env = build_env(rc.env)
    if rc.params:
        try:
            with open(rc.params) as fh:
                params, spec = params_from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read params file {rc.params}: {exc}") from exc
        model = build_model(spec)
        theta = params.flat
        if spec.n != env.n or spec.m != env.m:
            raise ConfigError("params file does not match the environment dimensions")
    else:
        model, theta = None, None
    pc = rc.planner
    cfg = TrainCfg(
        spec=model.spec if model else model_spec(env, pc), env=env.spec.name, K=0, N=1,
        stochastic=stochastic_cfg(rc.policy, env, rc.seed),
        solver=SolverCfg(grad_tol=pc.grad_tol, max_iters=pc.max_iters),
        constraints=box_constraints(env.m, pc.u_bound), fit_seed=rc.seed, final_eval=False,
    )
    if model is None:
        model = build_model(cfg.spec)
        theta = initial_theta(env, model, cfg)
    tr = rollout(env, model, theta, cfg, k=rc.k, n=rc.n)
    docs = [
        {"t": t, "x": tr.states[t], "u_star": tr.plan_means[t], "u": tr.actions[t], "c_t": tr.costs[t]}
        for t in range(tr.T)
    ]
    docs.append({
        "summary": True, "T": tr.T, "total_cost": tr.total_cost, "terminal_cost": tr.terminal_cost,
        "x_final": tr.states[-1], "seed": rc.seed, "sigma": policy_sigma(rc.policy, env), "k": rc.k, "n": rc.n,
    })
    return docs
