import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffop.exceptions import ConfigError, DimensionMismatch
from diffop.models import (
    DiagonalQuadraticCost,
    LinearDynamics,
    ModelSpec,
    PolicyModel,
    QuadraticTerminalCost,
    ZeroTerminalCost,
    build_model,
)
from diffop.numkit import fd_jacobian, rel_err
from diffop.ocp import (
    ACTIVE_TOL,
    ConstraintSpec,
    Ineq,
    SolverCfg,
    ZetaLayout,
    constraint_system,
    detect_active_set,
    kkt_residual,
    rollout_states,
    shift_warm_start,
    solve_plan,
    unrolled_cost,
    unrolled_derivs,
    with_warm_start,
)

seeds = st.integers(0, 2**32 - 1)


def scalar_lqr(H=1, terminal=True):
    """cost x^2 + u^2 per step (+ x_H^2), dynamics x' = x + u."""
    term = QuadraticTerminalCost(1) if terminal else ZeroTerminalCost(1)
    model = PolicyModel(DiagonalQuadraticCost(1, 1), term, LinearDynamics(1, 1), H)
    theta = np.array([1.0, 1.0] + ([1.0] if terminal else []) + [1.0, 1.0])
    return model, theta


def random_lqr(rng, n=None, m=None, H=3):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    model = build_model(ModelSpec(n=n, m=m, H=H, dt=0.1, x_goal=list(rng.normal(size=n))))
    theta = 0.5 * rng.normal(size=model.d)
    theta[model.sl_c] = rng.normal(size=model.sl_c.stop)
    return model, theta


def closed_form_lqr(model, theta, x_init):
    """Minimize the unrolled quadratic exactly: one linear solve of H u = -g(0)."""
    d = unrolled_derivs(model, theta, x_init, np.zeros(model.m * model.H), with_theta=False)
    return np.linalg.solve(d.hess, -d.grad)


# ------------------------------------------------------------ unrolled cost


def test_unrolled_cost_scalar_example():
    # J = u^2 + (x_init + u)^2 with H=1 and terminal weight 1, x stage weight 0 at x=1? use x_init=1
    model = PolicyModel(DiagonalQuadraticCost(1, 1), QuadraticTerminalCost(1), LinearDynamics(1, 1), 1)
    theta = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    assert unrolled_cost(model, theta, [1.0], [0.0]) == 1.0


def test_unrolled_cost_zero_at_goal():
    rng = np.random.default_rng(0)
    goal = [0.3, -0.2]
    model = build_model(ModelSpec(n=2, m=1, H=4, x_goal=goal))
    theta = rng.normal(size=model.d)
    theta[model.sl_f] = 0.0
    assert unrolled_cost(model, theta, goal, np.zeros(4)) == 0.0


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_unrolled_cost_matches_stepwise_sum(seed):
    rng = np.random.default_rng(seed)
    model, theta = random_lqr(rng)
    x0 = rng.normal(size=model.n)
    u = rng.normal(size=model.m * model.H)
    tc, tH, tf = model.split(theta)
    x, total = x0, 0.0
    for i in range(model.H):
        ui = u[i * model.m : (i + 1) * model.m]
        total += model.stage_cost(tc, x, ui)
        x = model.dynamics_step(tf, x, ui)
    total += model.terminal_cost(tH, x)
    assert unrolled_cost(model, theta, x0, u) == pytest.approx(total, rel=1e-13)
    np.testing.assert_allclose(rollout_states(model, theta, x0, u)[-1], x)


@settings(max_examples=15, deadline=None)
@given(seeds, st.sampled_from(["quadratic", "icnn"]), st.sampled_from(["linear_euler", "icnn_residual"]))
def test_unrolled_derivs_match_fd(seed, cost_kind, dyn_kind):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(n=3, m=1, H=3, cost_kind=cost_kind, dynamics_kind=dyn_kind, icnn_widths=(3,))
    model = build_model(spec)
    theta = 0.5 * rng.normal(size=model.d)
    x0, u = rng.normal(size=3), rng.normal(size=3)
    d = unrolled_derivs(model, theta, x0, u)
    g = fd_jacobian(lambda v: unrolled_cost(model, theta, x0, v), u)[0]
    H = fd_jacobian(lambda v: unrolled_derivs(model, theta, x0, v, order=1, with_theta=False).grad, u)
    C = fd_jacobian(lambda th: unrolled_derivs(model, th, x0, u, order=1, with_theta=False).grad, theta)
    assert rel_err(d.grad, g) <= 1e-5
    assert rel_err(d.hess, H) <= 1e-5
    assert rel_err(d.cross, C) <= 1e-5
    np.testing.assert_allclose(d.hess, d.hess.T, atol=1e-10)


def test_unrolled_hessian_constant_for_lqr():
    rng = np.random.default_rng(1)
    model, theta = random_lqr(rng, 2, 2)
    x0 = rng.normal(size=2)
    h1 = unrolled_derivs(model, theta, x0, np.zeros(6)).hess
    h2 = unrolled_derivs(model, theta, 3 * x0, rng.normal(size=6)).hess
    np.testing.assert_allclose(h1, h2, rtol=1e-12, atol=1e-12)


def test_hessian_matches_fd_of_gradient_via_numkit():
    rng = np.random.default_rng(2)
    model, theta = random_lqr(rng, 3, 1)
    x0 = rng.normal(size=3)
    u = rng.normal(size=3)
    Hfd = fd_jacobian(lambda v: unrolled_derivs(model, theta, x0, v, order=1, with_theta=False).grad, u)
    assert rel_err(unrolled_derivs(model, theta, x0, u).hess, Hfd) <= 1e-5


def test_unrolled_dimension_mismatch():
    model, theta = scalar_lqr(2)
    with pytest.raises(DimensionMismatch):
        unrolled_cost(model, theta, [1.0], [0.0])


# ------------------------------------------------------------ solver


def test_scalar_solution():
    model, theta = scalar_lqr(1, terminal=False)
    # H=1 with only stage cost u^2 + x^2 is independent of u's effect; use terminal instead
    model = PolicyModel(DiagonalQuadraticCost(1, 1), QuadraticTerminalCost(1), LinearDynamics(1, 1), 1)
    theta = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    plan = solve_plan(model, theta, [1.0])
    assert plan.converged
    assert plan.u0[0] == pytest.approx(-0.5, abs=1e-12)
    assert len(plan.states) == 2 and len(plan.actions) == 1


def test_zero_plan_at_goal():
    rng = np.random.default_rng(3)
    goal = [0.5, -1.0, 2.0]
    model = build_model(ModelSpec(n=3, m=2, H=3, x_goal=goal))
    theta = rng.normal(size=model.d)
    theta[model.sl_f] = 0.0  # goal is an equilibrium under u = 0
    plan = solve_plan(model, theta, goal)
    np.testing.assert_allclose(plan.actions, 0.0, atol=1e-14)


def box_instance():
    model = PolicyModel(DiagonalQuadraticCost(1, 1), QuadraticTerminalCost(1), LinearDynamics(1, 1), 1)
    theta = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    cons = ConstraintSpec(u_lower=[-0.3], u_upper=[0.3])
    return model, theta, cons


def test_box_solution_brute_force():
    model, theta, cons = box_instance()
    plan = solve_plan(model, theta, [1.0], cons)
    grid = np.arange(-0.3, 0.3 + 1e-9, 1e-4)
    costs = [unrolled_cost(model, theta, [1.0], [u]) for u in grid]
    assert plan.u0[0] == pytest.approx(grid[int(np.argmin(costs))], abs=1e-4)
    assert plan.u0[0] == -0.3
    assert plan.active_set == [0]
    assert cons.enumerate(1, 1)[0] == Ineq(0, "lower", 0)
    assert plan.ineq_multipliers[0] >= 0
    assert plan.kkt_residual <= 1e-10


def test_interior_solution_has_empty_active_set():
    model, theta, _ = box_instance()
    plan = solve_plan(model, theta, [1.0], ConstraintSpec(u_lower=[-2.0], u_upper=[2.0]))
    assert plan.active_set == []
    assert detect_active_set(model, plan, ConstraintSpec(u_lower=[-2.0], u_upper=[2.0])) == []


def test_active_set_tolerance_boundary():
    model, theta, cons = box_instance()
    plan = solve_plan(model, theta, [1.0], ConstraintSpec(u_lower=[-2.0], u_upper=[2.0]))
    u = plan.u0[0]
    half = ConstraintSpec(u_lower=[u + ACTIVE_TOL / 2], u_upper=[5.0])  # g = -tol/2 ... inclusive
    inside = ConstraintSpec(u_lower=[u - ACTIVE_TOL / 2], u_upper=[5.0])  # g = -tol/2 -> included
    far = ConstraintSpec(u_lower=[u - 2 * ACTIVE_TOL], u_upper=[5.0])  # g = -2 tol -> excluded
    assert detect_active_set(model, plan, inside) == [0]
    assert detect_active_set(model, plan, far) == []
    assert detect_active_set(model, plan, half) == [0]  # violated constraints count as active


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_matches_closed_form_qp(seed):
    rng = np.random.default_rng(seed)
    model, theta = random_lqr(rng)
    x0 = rng.normal(size=model.n)
    plan = solve_plan(model, theta, x0)
    assert plan.converged
    assert np.linalg.norm(plan.u_seq - closed_form_lqr(model, theta, x0)) <= 1e-8
    g = unrolled_derivs(model, theta, x0, plan.u_seq, order=1, with_theta=False).grad
    assert np.linalg.norm(g) <= SolverCfg().grad_tol


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_warm_restart_converges_fast(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(n=3, m=1, H=3, cost_kind="icnn", dynamics_kind="icnn_residual", icnn_widths=(3,))
    model = build_model(spec)
    theta = np.zeros(model.d)
    theta[model.sl_c] = model.stage.net.layout.init_params(rng, scale=0.5, z_offset=-1.0)
    theta[model.sl_H] = 1.0
    theta[model.sl_f] = model.dynamics.net.layout.init_params(rng, scale=0.3)
    x0 = 0.5 * rng.normal(size=3)
    plan = solve_plan(model, theta, x0)
    assert plan.converged
    again = solve_plan(model, theta, x0, cfg=with_warm_start(SolverCfg(), plan.u_seq))
    assert again.converged and again.iterations <= 2


def test_solver_deterministic():
    rng = np.random.default_rng(4)
    model, theta = random_lqr(rng, 3, 2)
    cons = ConstraintSpec(u_lower=[-0.2, -0.2], u_upper=[0.2, 0.2])
    x0 = 3 * rng.normal(size=3)
    a = solve_plan(model, theta, x0, cons)
    b = solve_plan(model, theta, x0, cons)
    assert a.actions.tobytes() == b.actions.tobytes()
    assert a.multipliers.tobytes() == b.multipliers.tobytes()


def test_max_iterations_reported_not_raised():
    rng = np.random.default_rng(5)
    spec = ModelSpec(n=2, m=1, H=3, cost_kind="icnn", icnn_widths=(3,))
    model = build_model(spec)
    theta = rng.normal(size=model.d)
    plan = solve_plan(model, theta, [3.0, -2.0], cfg=SolverCfg(max_iters=0))
    assert not plan.converged
    assert "maximum iterations" in plan.message


def test_nonconvex_detected_falls_back():
    # negative stage weight on x with a strong terminal pull keeps J bounded but indefinite at u=0
    model = PolicyModel(DiagonalQuadraticCost(1, 1), QuadraticTerminalCost(1), LinearDynamics(1, 1), 2)
    theta = np.array([-1.0, 0.05, 2.0, 1.0, 1.0])
    plan = solve_plan(model, theta, [1.0], ConstraintSpec(u_lower=[-1.0], u_upper=[1.0]))
    assert plan.nonconvex_detected
    assert np.all(np.abs(plan.actions) <= 1.0 + 1e-12)


def test_general_inequality_via_augmented_lagrangian():
    # ||u||^2 <= 0.04 on every step, expressed as g(x, u) = u^2 - 0.04
    model, theta, _ = box_instance()
    cons = ConstraintSpec(
        g=lambda x, u: np.array([u[0] ** 2 - 0.04]),
        g_jac=lambda x, u: np.array([[0.0, 2 * u[0]]]),
        g_hess=lambda x, u: np.array([[[0.0, 0.0], [0.0, 2.0]]]),
        n_g=1,
    )
    plan = solve_plan(model, theta, [1.0], cons)
    assert plan.converged
    assert plan.u0[0] == pytest.approx(-0.2, abs=1e-8)
    assert plan.active_set == [0]
    assert plan.ineq_multipliers[0] > 0
    assert plan.kkt_residual <= 1e-7


def test_constraint_spec_validation():
    with pytest.raises(ConfigError):
        ConstraintSpec(g=lambda x, u: 0)
    with pytest.raises(ConfigError):
        ConstraintSpec(g=lambda x, u: 0, g_jac=lambda x, u: 0)
    with pytest.raises(ConfigError):
        ConstraintSpec(u_lower=[1.0], u_upper=[0.0]).bounds(2, 1)
    with pytest.raises(ConfigError):
        SolverCfg(grad_tol=0.0)


# ------------------------------------------------------------ KKT residual and multipliers


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_converged_residual_small(seed):
    rng = np.random.default_rng(seed)
    model, theta = random_lqr(rng)
    plan = solve_plan(model, theta, rng.normal(size=model.n))
    assert plan.kkt_residual <= 1e-10
    A, z, grad, labels, _ = constraint_system(model, theta, plan, None)
    assert A.shape == (model.n * (model.H + 1), ZetaLayout(model.n, model.m, model.H).dim)
    np.testing.assert_allclose(A.T @ plan.multipliers, grad, atol=1e-10)


def test_multipliers_equal_adjoint_at_optimum():
    rng = np.random.default_rng(6)
    model, theta = random_lqr(rng, 3, 1)
    x0 = rng.normal(size=3)
    plan = solve_plan(model, theta, x0)
    adj = unrolled_derivs(model, theta, x0, plan.u_seq, order=1, with_theta=False).adjoint
    np.testing.assert_allclose(plan.multipliers, adj.reshape(-1), atol=1e-10)


def test_residual_of_independent_lqr_solution():
    rng = np.random.default_rng(7)
    model, theta = random_lqr(rng, 2, 2)
    x0 = rng.normal(size=2)
    u = closed_form_lqr(model, theta, x0)
    plan = solve_plan(model, theta, x0, cfg=with_warm_start(SolverCfg(max_iters=0), u))
    assert kkt_residual(model, theta, plan) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_perturbed_plan_residual_lower_bound(seed):
    # shift u*_0 by 0.1, re-roll the states and use the adjoint multipliers at
    # the perturbed point: the u-block of the residual is then H @ delta
    rng = np.random.default_rng(seed)
    model, theta = random_lqr(rng)
    x0 = rng.normal(size=model.n)
    plan = solve_plan(model, theta, x0)
    u = plan.u_seq.copy()
    u[0] += 0.1
    moved = solve_plan(model, theta, x0, cfg=with_warm_start(SolverCfg(max_iters=0), u))
    d = unrolled_derivs(model, theta, x0, u, with_theta=False)
    moved.multipliers = d.adjoint.reshape(-1)
    lam_min = np.linalg.eigvalsh(d.hess)[0]
    assert kkt_residual(model, theta, moved) >= 0.1 * lam_min


def test_kkt_residual_wrong_multiplier_length():
    model, theta = scalar_lqr(2)
    plan = solve_plan(model, theta, [1.0])
    plan.multipliers = np.zeros(1)
    with pytest.raises(DimensionMismatch):
        kkt_residual(model, theta, plan)


def test_shift_warm_start():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(shift_warm_start(a), [3, 4, 5, 6, 5, 6])
