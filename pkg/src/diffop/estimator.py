"""scikit-learn style wrappers around the planning policy and the model fit."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .envs import make_env
from .exceptions import DimensionMismatch
from .implicit import policy_jacobian
from .models import LinearEulerDynamics, ModelSpec, build_model
from .ocp import ConstraintSpec, SolverCfg, solve_plan
from .policy import StochasticCfg
from .train import TrainCfg, rollout, train


def check_states(X, n, name="X"):
    """2-D float array of shape ``(n_samples, n)``."""
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != n:
        raise DimensionMismatch(f"{name} has {X.shape[1]} columns, expected state dimension {n}")
    return X


class LinearDynamicsRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``x_next = x + dt * Theta' [x; u]``.

    ``fit`` takes stacked ``[x, u]`` rows and the next states; ``predict``
    returns next states. ``theta_`` is the flat parameter block used by
    the planner's linear Euler model.
    """

    def __init__(self, n_states=4, dt=0.05):
        self.n_states = n_states
        self.dt = dt

    def fit(self, XU, Xnext):
        XU, Xnext = check_X_y(XU, Xnext, dtype=float, multi_output=True, y_numeric=True)
        Xnext = np.atleast_2d(Xnext.T).T
        n = self.n_states
        if Xnext.shape[1] != n or XU.shape[1] <= n:
            raise DimensionMismatch("XU must hold [x, u] and Xnext the next states")
        Th, *_ = np.linalg.lstsq(XU, (Xnext - XU[:, :n]) / self.dt, rcond=None)
        self.model_ = LinearEulerDynamics(n, XU.shape[1] - n, self.dt)
        self.theta_ = Th.reshape(-1)
        self.A_, self.B_ = self.model_.matrices(self.theta_)
        self.n_features_in_ = XU.shape[1]
        return self

    def predict(self, XU):
        check_is_fitted(self, "theta_")
        XU = check_array(XU, dtype=float)
        if XU.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {XU.shape[1]}")
        n = self.n_states
        return XU[:, :n] @ self.A_.T + XU[:, n:] @ self.B_.T


class DiffOPController(BaseEstimator):
    """Trainable optimization-based controller for a registered environment.

    ``fit`` runs policy-gradient training; ``predict`` maps states to the
    planned first action ``u*_0``; ``score`` is the negative mean
    deterministic episode cost from the given initial states. ``sigma=None``
    uses ``0.1 * action_scale`` of the environment; ``sigma=0`` disables noise.
    """

    def __init__(
        self, env="cartpole", H=3, cost_kind="quadratic", dynamics_kind="linear_euler",
        icnn_widths=(4,), K=100, N=10, eta=1e-3, sigma=None, beta=None, seed=0,
        u_bound=None, baseline=False, env_overrides=None,
    ):
        self.env = env
        self.H = H
        self.cost_kind = cost_kind
        self.dynamics_kind = dynamics_kind
        self.icnn_widths = icnn_widths
        self.K = K
        self.N = N
        self.eta = eta
        self.sigma = sigma
        self.beta = beta
        self.seed = seed
        self.u_bound = u_bound
        self.baseline = baseline
        self.env_overrides = env_overrides

    def _setup(self):
        env = make_env(self.env, **dict(self.env_overrides or {}))
        spec = ModelSpec(
            n=env.n, m=env.m, H=self.H, cost_kind=self.cost_kind, dynamics_kind=self.dynamics_kind,
            dt=env.dt, icnn_widths=tuple(self.icnn_widths), x_goal=list(env.spec.goal()), env=self.env,
        )
        cons = None
        if self.u_bound is not None:
            b = float(self.u_bound)
            cons = ConstraintSpec(u_lower=-b * np.ones(env.m), u_upper=b * np.ones(env.m))
        sigma = 0.1 * env.spec.action_scale if self.sigma is None else float(self.sigma)
        stoch = StochasticCfg(sigma=sigma, beta=self.beta, seed=self.seed) if sigma > 0 else None
        cfg = TrainCfg(
            spec=spec, env=self.env, K=self.K, N=self.N, eta=self.eta, stochastic=stoch,
            constraints=cons, baseline=self.baseline, fit_seed=self.seed,
        )
        return env, cfg

    def fit(self, X=None, y=None):
        env, cfg = self._setup()
        res = train(env, cfg)
        self.env_, self.cfg_, self.model_ = env, cfg, res.model
        self.theta_, self.theta0_ = res.theta, res.theta0
        self.records_, self.final_ = res.records, res.final
        self.n_features_in_ = env.n
        return self

    def _plans(self, X):
        check_is_fitted(self, "theta_")
        X = check_states(X, self.env_.n)
        return X, [solve_plan(self.model_, self.theta_, x, self.cfg_.constraints, self.cfg_.solver) for x in X]

    def predict(self, X):
        X, plans = self._plans(X)
        return np.vstack([p.u0 for p in plans])

    def policy_jacobian(self, X):
        """``d u*_0 / d theta`` per state, shape ``(n_samples, m, d)``."""
        X, plans = self._plans(X)
        return np.stack([
            policy_jacobian(self.model_, self.theta_, x, p, self.cfg_.constraints) for x, p in zip(X, plans)
        ])

    def score(self, X=None, y=None):
        check_is_fitted(self, "theta_")
        X0 = self.env_.spec.initial()[None] if X is None else check_states(X, self.env_.n)
        det = TrainCfg(
            spec=self.cfg_.spec, env=self.cfg_.env, K=0, N=1, stochastic=None,
            constraints=self.cfg_.constraints, solver=SolverCfg(),
        )
        costs = [rollout(self.env_, self.model_, self.theta_, det, x0=x).total_cost for x in X0]
        return -float(np.mean(costs))
