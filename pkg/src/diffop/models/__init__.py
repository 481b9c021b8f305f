from .base import DynDerivs, StageDerivs, TerminalDerivs
from .costs import (
    R_MIN,
    DiagonalQuadraticCost,
    IcnnCost,
    QuadraticCost,
    QuadraticTerminalCost,
    ZeroTerminalCost,
)
from .dynamics import FDDynamics, IcnnResidualDynamics, LinearDynamics, LinearEulerDynamics
from .icnn import Icnn, IcnnLayout, icnn_forward
from .params import (
    ModelSpec,
    PolicyModel,
    PolicyParams,
    build_model,
    dumps_17g,
    pack_params,
    params_from_json,
    params_to_json,
    unpack_params,
)
from .symbolic import SymbolicCost, SymbolicDynamics, SymbolicTerminalCost
