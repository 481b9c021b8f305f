"""JSON configuration documents for the experiment commands.

Every document is validated before any computation and unknown keys are
rejected. Command-line flags override file values.
"""

import json
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..exceptions import ConfigError

U64_MAX = 2**64 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvCfg(_Strict):
    name: Literal["cartpole", "cartpole_linear", "robotarm", "quadrotor"] = "cartpole"
    dt: Optional[float] = Field(None, gt=0)
    T: Optional[int] = Field(None, ge=1)
    x0: Optional[List[float]] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    cost: Dict[str, Any] = Field(default_factory=dict)


class PlannerCfg(_Strict):
    H: int = Field(3, ge=1)
    cost_kind: Literal["quadratic", "icnn"] = "quadratic"
    dynamics_kind: Literal["linear_euler", "icnn_residual", "analytic"] = "linear_euler"
    terminal_kind: Literal["quadratic", "zero"] = "quadratic"
    icnn_widths: List[int] = Field(default_factory=lambda: [4])
    u_bound: Optional[float] = Field(None, gt=0)
    grad_tol: float = Field(1e-10, gt=0)
    max_iters: int = Field(200, ge=1)


class PolicyCfg(_Strict):
    """``sigma=None`` means 0.1 x the environment's action scale; 0 disables sampling."""

    sigma: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, gt=0)
    half_width_mode: Literal["beta_sigma2", "beta_sigma"] = "beta_sigma2"


class TrainConfig(_Strict):
    env: EnvCfg = Field(default_factory=EnvCfg)
    planner: PlannerCfg = Field(default_factory=PlannerCfg)
    policy: PolicyCfg = Field(default_factory=PolicyCfg)
    K: int = Field(100, ge=0)
    N: int = Field(10, ge=1)
    eta: float = Field(1e-3, ge=0)
    baseline: bool = False
    trainable: Literal["all", "cost", "dynamics"] = "all"
    seed: int = Field(0, ge=0, le=U64_MAX)
    repeats: int = Field(5, ge=1)
    fit_dynamics: bool = True
    n_fit_traj: int = Field(20, ge=1)
    threads: Optional[int] = Field(None, ge=1)
    record_wall_time: bool = True
    checkpoint_every: int = Field(10, ge=0)


class GradcheckConfig(_Strict):
    family: Literal["lqr", "cartpole-icnn", "boxed-lqr"] = "lqr"
    trials: int = Field(20, ge=1)
    seed: int = Field(0, ge=0, le=U64_MAX)
    grad_tol: float = Field(1e-12, gt=0)
    fd_h: Optional[float] = Field(None, gt=0)
    tol_fd: float = Field(1e-4, gt=0)
    tol_analytic: float = Field(1e-6, gt=0)
    floor: float = Field(1e-9, gt=0)
    H: int = Field(3, ge=1)
    n_max: int = Field(4, ge=1)
    m_max: int = Field(2, ge=1)
    box: float = Field(0.3, gt=0)
    replay: Optional[str] = None


class MeasureCfg(_Strict):
    n: int = Field(2, ge=1)
    m: int = Field(1, ge=1)
    H: int = Field(3, ge=1)
    samples: int = Field(10, ge=1)


class TheoryConfig(_Strict):
    mu: float = 1.0
    L1: float = 1.0
    L2: float = 1.0
    L3: float = 1.0
    M: float = 1.0
    m: int = 1
    beta: float = 1.0
    sigma: float = 1.0
    T: int = 1
    eps: float = 1.0
    K: int = 1
    d: int = 1
    nu: float = 0.7357588823428847
    measure: bool = False
    measure_cfg: MeasureCfg = Field(default_factory=MeasureCfg)
    seed: int = Field(0, ge=0, le=U64_MAX)


class RolloutConfig(_Strict):
    env: EnvCfg = Field(default_factory=EnvCfg)
    planner: PlannerCfg = Field(default_factory=PlannerCfg)
    policy: PolicyCfg = Field(default_factory=PolicyCfg)
    params: Optional[str] = None
    seed: int = Field(0, ge=0, le=U64_MAX)
    k: int = Field(0, ge=0)
    n: int = Field(0, ge=0)


class NonconvexityConfig(_Strict):
    pass


SCHEMAS = {
    "train": TrainConfig,
    "gradcheck": GradcheckConfig,
    "nonconvexity": NonconvexityConfig,
    "theory": TheoryConfig,
    "rollout": RolloutConfig,
}


def load_config(command, path=None, overrides=None):
    """Read (optional) JSON at ``path``, apply flag overrides, validate.

    Raises :class:`ConfigError` on malformed JSON, unknown keys or
    out-of-range values. The file itself is never written.
    """
    schema = SCHEMAS[command]
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    doc = {**doc, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    extra = set(doc) - set(schema.model_fields)
    if extra:
        raise ConfigError(f"unknown keys for {command}: {sorted(extra)}")
    try:
        return schema.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def json_schema(command):
    return SCHEMAS[command].model_json_schema()
