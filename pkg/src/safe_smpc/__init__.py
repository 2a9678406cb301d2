"""Safe stochastic MPC: a chance-constrained MPC guarded by a tube-based robust backup."""

from safe_smpc.errors import (
    BetaOutOfRange,
    ConfigError,
    DimensionMismatch,
    EmptyTightenedSet,
    InfeasibleController,
    SafeSmpcError,
    UnsafeStart,
    UnstablePhi,
)
from safe_smpc.lqr import solve_dare
from safe_smpc.polytope import Polytope
from safe_smpc.qp import QpProblem, QpStatus, solve_qp
from safe_smpc.rmpc import backup_control, backup_feasible, synthesize_rmpc
from safe_smpc.safety import Mode, safe_step, safety_check
from safe_smpc.smpc import smpc_control, synthesize_smpc, tightening_offset
from safe_smpc.system import LinearSystem

__all__ = [
    "BetaOutOfRange", "ConfigError", "DimensionMismatch", "EmptyTightenedSet",
    "InfeasibleController", "SafeSmpcError", "UnsafeStart", "UnstablePhi",
    "solve_dare", "Polytope", "QpProblem", "QpStatus", "solve_qp",
    "backup_control", "backup_feasible", "synthesize_rmpc",
    "Mode", "safe_step", "safety_check",
    "smpc_control", "synthesize_smpc", "tightening_offset", "LinearSystem",
]
