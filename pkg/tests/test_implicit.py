import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffop.exceptions import DimensionMismatch
from diffop.implicit import (
    GradReport,
    build_kkt_blocks,
    crosscheck,
    fd_through_resolve,
    grad_kkt,
    grad_reduced,
    grad_unconstrained,
    policy_jacobian,
)
from diffop.models import DiagonalQuadraticCost, LinearDynamics, ModelSpec, PolicyModel, QuadraticTerminalCost, build_model
from diffop.numkit import rel_err
from diffop.ocp import ConstraintSpec, SolverCfg, solve_plan

seeds = st.integers(0, 2**32 - 1)
TIGHT = SolverCfg(grad_tol=1e-12, max_iters=500)


def random_lqr(rng, H=3):
    n, m = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    model = build_model(ModelSpec(n=n, m=m, H=H, dt=0.1, x_goal=list(rng.normal(size=n))))
    theta = 0.5 * rng.normal(size=model.d)
    theta[model.sl_c] = rng.normal(size=model.sl_c.stop)
    return model, theta, rng.normal(size=n)


def scalar_model(H=1):
    return PolicyModel(DiagonalQuadraticCost(1, 1), QuadraticTerminalCost(1), LinearDynamics(1, 1), H)


def test_scalar_closed_form_jacobian():
    # theta = [q, r, qH, a, b]; H=1, x' = a x + b u, J = q x0^2 + r u^2 + qH^2 (a x0 + b u)^2
    # u* = -qH^2 a b x0 / (r + qH^2 b^2); at q=0, r=qH=a=b=1, x0=1: u* = -1/2
    model = scalar_model()
    theta = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    plan = solve_plan(model, theta, [1.0], cfg=TIGHT)
    G = policy_jacobian(model, theta, [1.0], plan)
    # du/dr = qH^2 a b x0 / den^2 = 1/4, du/dqH = -2 qH a b x0 r / den^2 = -1/2
    # du/da = -qH^2 b x0 / den = -1/2, du/db = -qH^2 a x0 (r - qH^2 b^2) / den^2 = 0
    assert plan.u0[0] == pytest.approx(-0.5, abs=1e-12)
    np.testing.assert_allclose(G, [[0.0, 0.25, -0.5, -0.5, 0.0]], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_routes_agree_unconstrained(seed):
    rng = np.random.default_rng(seed)
    model, theta, x0 = random_lqr(rng)
    plan = solve_plan(model, theta, x0, cfg=TIGHT)
    rep = crosscheck(model, theta, x0, plan, fd_cfg=TIGHT)
    assert set(rep.methods) == {"kkt", "unconstrained", "fd"}
    assert rep.error("kkt", "unconstrained") <= 1e-6
    assert rep.error("kkt", "fd") <= 1e-4
    assert not rep.unreliable


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_routes_agree_with_box(seed):
    rng = np.random.default_rng(seed)
    model, theta, x0 = random_lqr(rng)
    x0 = 3 * x0
    cons = ConstraintSpec(u_lower=[-0.3] * model.m, u_upper=[0.3] * model.m)
    plan = solve_plan(model, theta, x0, cons, cfg=TIGHT)
    rep = crosscheck(model, theta, x0, plan, cons, fd_cfg=TIGHT, full=True, floor=1e-9)
    if plan.weakly_active:
        return  # nondifferentiable point; the oracle is not meaningful
    red = rep.routes.get("reduced")
    if red is not None and not np.any(red):
        # fully clamped: the exact Jacobian vanishes, compare in absolute terms
        assert np.max(np.abs(rep.routes["kkt"])) <= 1e-10
        return
    assert rep.error("kkt", "fd") <= 1e-4
    if plan.active_set:
        assert rep.error("kkt", "reduced") <= 1e-6
        enum = cons.enumerate(model.H, model.m)
        for k in plan.active_set:
            np.testing.assert_array_equal(red[enum[k].step * model.m + enum[k].index], 0.0)


def test_general_inequality_uses_kkt():
    model = scalar_model()
    theta = np.array([0.5, 1.0, 1.0, 1.0, 1.0])  # q > 0 keeps the zeta Hessian invertible
    cons = ConstraintSpec(
        g=lambda x, u: np.array([u[0] ** 2 - 0.04]),
        g_jac=lambda x, u: np.array([[0.0, 2 * u[0]]]),
        g_hess=lambda x, u: np.array([[[0.0, 0.0], [0.0, 2.0]]]),
        n_g=1,
    )
    plan = solve_plan(model, theta, [1.0], cons, cfg=TIGHT)
    G = policy_jacobian(model, theta, [1.0], plan, cons)
    # u* is pinned at -0.2 whatever theta is
    np.testing.assert_allclose(G, 0.0, atol=1e-9)
    rep = crosscheck(model, theta, [1.0], plan, cons, fd_cfg=TIGHT, floor=1e-9)
    assert "reduced" not in rep.routes  # the reduced route only handles box constraints
    assert np.max(np.abs(rep.routes["fd"])) <= 1e-8


def test_auto_route_selection():
    model = scalar_model()
    theta = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    cons = ConstraintSpec(u_lower=[-0.3], u_upper=[0.3])
    plan = solve_plan(model, theta, [1.0], cons, cfg=TIGHT)
    G = policy_jacobian(model, theta, [1.0], plan, cons)
    np.testing.assert_array_equal(G, grad_reduced(model, theta, [1.0], plan, cons))
    free = solve_plan(model, theta, [1.0], cfg=TIGHT)
    np.testing.assert_array_equal(policy_jacobian(model, theta, [1.0], free), grad_unconstrained(model, theta, [1.0], free))
    with pytest.raises(ValueError):
        policy_jacobian(model, theta, [1.0], free, method="sideways")


def test_kkt_matches_unconstrained_icnn():
    rng = np.random.default_rng(11)
    spec = ModelSpec(n=3, m=1, H=3, cost_kind="icnn", dynamics_kind="icnn_residual", icnn_widths=(3,))
    model = build_model(spec)
    theta = np.zeros(model.d)
    theta[model.sl_c] = model.stage.net.layout.init_params(rng, scale=0.5, z_offset=-1.0)
    theta[model.sl_H] = 1.0
    theta[model.sl_f] = model.dynamics.net.layout.init_params(rng, scale=0.3)
    x0 = 0.5 * rng.normal(size=3)
    plan = solve_plan(model, theta, x0, cfg=TIGHT)
    a = grad_kkt(build_kkt_blocks(model, theta, plan))
    b = grad_unconstrained(model, theta, x0, plan)
    assert rel_err(a, b) <= 1e-6
    J, ok = fd_through_resolve(model, theta, x0, cfg=TIGHT, warm=plan.u_seq)
    assert ok and rel_err(a, J) <= 1e-4


def test_loose_solver_breaks_agreement():
    rng = np.random.default_rng(12)
    model, theta, x0 = random_lqr(rng)
    loose = SolverCfg(grad_tol=1e-4)
    plan = solve_plan(model, theta, 50 * x0, cfg=SolverCfg(grad_tol=1e-4, max_iters=1))
    rep = crosscheck(model, theta, 50 * x0, plan, fd_cfg=loose)
    assert rep.unreliable or rep.max_rel_err > 1e-6


def test_unconverged_plan_flagged():
    rng = np.random.default_rng(13)
    model, theta, x0 = random_lqr(rng)
    plan = solve_plan(model, theta, x0, cfg=SolverCfg(max_iters=0))
    if plan.converged:
        pytest.skip("zero plan already optimal")
    rep = crosscheck(model, theta, x0, plan, fd=False)
    assert rep.unreliable
    assert any("not converged" in s for s in rep.notes)


def test_grad_report_json_round_trip():
    rng = np.random.default_rng(14)
    model, theta, x0 = random_lqr(rng)
    plan = solve_plan(model, theta, x0, cfg=TIGHT)
    rep = crosscheck(model, theta, x0, plan, fd_cfg=TIGHT)
    back = GradReport.from_json(rep.to_json())
    assert back.pairwise == rep.pairwise
    np.testing.assert_array_equal(back.analytic, rep.analytic)
    np.testing.assert_array_equal(back.routes["fd"], rep.routes["fd"])


def test_kkt_blocks_dimension_check():
    rng = np.random.default_rng(15)
    model, theta, x0 = random_lqr(rng)
    plan = solve_plan(model, theta, x0)
    plan.multipliers = np.zeros(1)
    with pytest.raises(DimensionMismatch):
        build_kkt_blocks(model, theta, plan)


def test_state_dependent_inequality_kkt_matches_fd():
    # g = x + u - 0.3 <= 0 couples the clamped action to theta through the state
    model = scalar_model(H=2)
    theta = np.array([0.5, 1.0, 1.0, 0.9, 1.1])
    cons = ConstraintSpec(
        g=lambda x, u: np.array([x[0] + u[0] - 0.3]),
        g_jac=lambda x, u: np.array([[1.0, 1.0]]),
        g_hess=lambda x, u: np.zeros((1, 2, 2)),
        n_g=1,
    )
    plan = solve_plan(model, theta, [1.0], cons, cfg=TIGHT)
    assert plan.converged and plan.active_set
    rep = crosscheck(model, theta, [1.0], plan, cons, fd_cfg=TIGHT, full=True)
    assert not rep.unreliable
    assert np.max(np.abs(rep.routes["kkt"][1])) > 1e-3  # u1 moves with x1
    assert rep.error("kkt", "fd") <= 1e-4
