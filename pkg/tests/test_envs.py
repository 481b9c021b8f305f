import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from diffop.envs import (
    EnvState,
    arm_energy,
    arm_matrices,
    cartpole_step,
    default_spec,
    linear_reference_lqr,
    make_env,
    omega_matrix,
    optimal_baseline,
    optimal_plan,
    quadrotor_step,
    random_input_data,
    robotarm_step,
    simulate,
    true_cost,
)
from diffop.exceptions import ConfigError, DimensionMismatch, NonFiniteEvaluation

seeds = st.integers(0, 2**32 - 1)


def hover_state():
    return np.array([0.3, -0.2, 1.0] + [0.0] * 3 + [1.0, 0.0, 0.0, 0.0] + [0.0] * 3)


def euler_error_ratio(name, x0, u, t_final=1.0, dt=0.01):
    """Global error at a fixed final time for dt and dt/2 against a tight ODE solve."""
    env = make_env(name)
    ref = solve_ivp(lambda t, x: env.rhs(x, u), (0, t_final), x0, method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
    errs = []
    for h in (dt, dt / 2):
        e = make_env(name, dt=h)
        x = np.asarray(x0, float)
        for _ in range(int(round(t_final / h))):
            x = e.step(x, u)
        errs.append(np.linalg.norm(x - ref))
    return errs[0] / errs[1]


# ------------------------------------------------------------ cartpole


def test_cartpole_upright_rest_is_fixed():
    spec = default_spec("cartpole")
    s = cartpole_step(EnvState(np.zeros(4)), 0.0, spec)
    np.testing.assert_array_equal(s.x, np.zeros(4))
    assert s.t == 1


def test_cartpole_unit_force_accelerations():
    env = make_env("cartpole")
    np.testing.assert_allclose(env.rhs(np.zeros(4), [1.0]), [0.0, 0.0, 1.0, -2.0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_cartpole_matches_straight_line_transcription(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    F = rng.normal() * 5
    mc, mp, l, g, dt = 1.0, 0.1, 0.5, 9.81, 0.05
    y, phi, yd, phid = x
    ydd = (F + mp * np.sin(phi) * (l * phid**2 + g * np.cos(phi))) / (mc + mp * np.sin(phi) ** 2)
    phidd = (-F * np.cos(phi) - mp * l * phid**2 * np.cos(phi) * np.sin(phi) - (mc + mp) * g * np.sin(phi)) / (
        l * (mc + mp * np.sin(phi) ** 2)
    )
    expect = x + dt * np.array([yd, phid, ydd, phidd])
    np.testing.assert_allclose(make_env("cartpole").step(x, [F]), expect, rtol=0, atol=1e-12)


def test_cartpole_cost_spot_value():
    # q = [1, 1, 0.3, 0.3], R = 0.1: 1 + 4 + 0 + 0 + 0.1 * 9 = 5.9 at x = [1, 2, 0, 0], u = 3
    env = make_env("cartpole")
    assert true_cost(env, [1.0, 2.0, 0.0, 0.0], [3.0]) == pytest.approx(5.9, rel=1e-14)
    assert env.cost(np.zeros(4), [0.0]) == 0.0


def test_cartpole_euler_order_one():
    assert 1.7 <= euler_error_ratio("cartpole", [0.0, 0.6, 0.0, 0.0], [0.0]) <= 2.3


# ------------------------------------------------------------ robot arm


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_arm_gravity_compensation(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-np.pi, np.pi, size=2)
    spec = default_spec("robotarm")
    _, _, G = arm_matrices(q, [0.0, 0.0], np, spec.params)
    s = robotarm_step(EnvState(np.r_[q, 0.0, 0.0]), np.asarray(G, float), spec)
    np.testing.assert_allclose(s.x, np.r_[q, 0.0, 0.0], atol=1e-14)


def test_arm_rest_position_is_fixed():
    s = robotarm_step(EnvState(np.zeros(4)), np.zeros(2), default_spec("robotarm"))
    np.testing.assert_array_equal(s.x, np.zeros(4))


def test_arm_inertia_symmetric_positive_definite():
    rng = np.random.default_rng(0)
    p = default_spec("robotarm").params
    for _ in range(20):
        M, _, _ = arm_matrices(rng.normal(size=2), rng.normal(size=2), np, p)
        M = np.asarray(M, float)
        np.testing.assert_array_equal(M, M.T)
        assert np.linalg.eigvalsh(M)[0] > 0


def test_arm_energy_drift_first_order():
    # zero torque from a fixed state over one second: drift halves with dt
    drifts = []
    for dt in (0.01, 0.005):
        env = make_env("robotarm", dt=dt)
        x = np.array([0.5, -0.5, 0.0, 0.0])
        e0 = arm_energy(x, env.spec.params)
        for _ in range(int(round(1.0 / dt))):
            x = env.step(x, [0.0, 0.0])
        drifts.append(abs(arm_energy(x, env.spec.params) - e0))
    assert drifts[1] < drifts[0]
    assert 1.7 <= drifts[0] / drifts[1] <= 2.3


def test_arm_euler_order_one():
    assert 1.7 <= euler_error_ratio("robotarm", [0.5, -0.5, 0.0, 0.0], [0.0, 0.0]) <= 2.3


# ------------------------------------------------------------ quadrotor


def test_quadrotor_hover_is_fixed():
    spec = default_spec("quadrotor")
    per = spec.params["m"] * spec.params["g"] / 4
    x = hover_state()
    s = quadrotor_step(EnvState(x), [per] * 4, spec)
    np.testing.assert_array_equal(s.x, x)


def test_omega_skew_symmetric():
    W = np.asarray(omega_matrix([0.3, -1.2, 2.0]), float)
    np.testing.assert_array_equal(W.T, -W)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_quaternion_unit_norm_and_drift_bound(seed):
    rng = np.random.default_rng(seed)
    env = make_env("quadrotor")
    x = hover_state()
    q = rng.normal(size=4)
    x[6:10] = q / np.linalg.norm(q)
    x[10:13] = rng.normal(size=3)
    for _ in range(10):
        raw = x[6:10] + env.dt * env.rhs(x, rng.uniform(0, 5, 4))[6:10]
        w = np.linalg.norm(x[10:13])
        assert abs(np.linalg.norm(raw) - 1.0) <= 0.5 * w * env.dt + (w * env.dt) ** 2
        x = env.step(x, rng.uniform(0, 5, 4))
        assert abs(np.linalg.norm(x[6:10]) - 1.0) <= 1e-15


def test_quadrotor_euler_order_one():
    q = np.array([1.0, 0.1, 0.05, 0.0])
    x0 = [0, 0, 0, 0.1, 0, 0] + list(q / np.linalg.norm(q)) + [0.3, -0.2, 0.1]
    assert 1.7 <= euler_error_ratio("quadrotor", x0, [2.6, 2.4, 2.5, 2.45]) <= 2.3


def test_quadrotor_trace_term_range():
    spec = default_spec("quadrotor", cost={"alpha": [1.0, 0.0, 0.0, 0.0], "r_u": 0.0})
    env = make_env("quadrotor", cost=spec.cost)
    rng = np.random.default_rng(1)
    assert env.cost(spec.goal(), np.zeros(4)) == 0.0
    for _ in range(50):
        x = spec.goal()
        q = rng.normal(size=4)
        x[6:10] = q / np.linalg.norm(q)
        assert 0.0 <= env.cost(x, np.zeros(4)) <= 2.0 + 1e-12
    x = spec.goal()
    x[6:10] = [0.0, 1.0, 0.0, 0.0]  # half-turn about x: Tr(R) = -1
    assert env.cost(x, np.zeros(4)) == pytest.approx(2.0)


# ------------------------------------------------------------ spec and helpers


def test_spec_validation():
    with pytest.raises(ConfigError):
        make_env("pendulum")
    with pytest.raises(ConfigError):
        make_env("cartpole", params={"m_c": -1.0})
    with pytest.raises(ConfigError):
        make_env("cartpole", x0=[0.0, 1.0])
    with pytest.raises(ConfigError):
        make_env("cartpole", dt=0.0)
    with pytest.raises(DimensionMismatch):
        make_env("cartpole").step(np.zeros(3), [0.0])
    with pytest.raises(DimensionMismatch):
        make_env("cartpole").cost(np.zeros(4), [0.0, 1.0])


def test_nonfinite_step_raises():
    with pytest.raises(NonFiniteEvaluation), np.errstate(all="ignore"):
        make_env("cartpole").step([0.0, 0.0, 0.0, 1e300], [0.0])


def test_default_overrides_merge():
    spec = default_spec("cartpole", cost={"R": 0.5})
    assert spec.cost["R"] == 0.5 and spec.cost["q"] == [1.0, 1.0, 0.3, 0.3]
    assert default_spec("cartpole").cost["R"] == 0.1  # registry defaults untouched


def test_random_input_data_shapes_and_bounds():
    env = make_env("robotarm", T=5)
    X, U, Xn = random_input_data(env, n_traj=3, rng=np.random.default_rng(0))
    assert X.shape == (15, 4) and U.shape == (15, 2) and Xn.shape == (15, 4)
    assert np.all(np.abs(U) <= env.spec.action_scale)
    np.testing.assert_allclose(Xn[0], env.step(X[0], U[0]))


# ------------------------------------------------------------ optimal baseline


def test_baseline_matches_riccati_on_linear_cartpole():
    env = make_env("cartpole_linear", T=20)
    assert optimal_baseline(env) == pytest.approx(linear_reference_lqr(env), rel=1e-6)


def test_baseline_zero_at_goal():
    env = make_env("cartpole", x0=[0.0, 0.0, 0.0, 0.0], T=5)
    plan = optimal_plan(env)
    np.testing.assert_array_equal(plan.actions, 0.0)
    assert optimal_baseline(env) == 0.0


def test_baseline_beats_random_sequences():
    env = make_env("cartpole", T=10)
    best = optimal_baseline(env)
    plan = optimal_plan(env)
    rng = np.random.default_rng(2)
    for _ in range(100):
        # random sequences and random perturbations of the optimum
        cand = rng.uniform(-10, 10, size=(10, 1)) if rng.random() < 0.5 else plan.actions + 0.3 * rng.normal(size=(10, 1))
        _, cost = simulate(env, env.spec.initial(), cand)
        assert best <= cost
