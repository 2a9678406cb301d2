"""Safe switching between the stochastic MPC and the robust backup.

The SMPC input is applied only when the undisturbed successor it produces
stays a disturbance-width inside the backup's feasibility region; otherwise
the backup input is applied.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from safe_smpc.errors import InfeasibleController, UnsafeStart, VertexEnumerationUnavailable
from safe_smpc.polytope import Polytope
from safe_smpc.qp import DEFAULT_TOLERANCES, SolverTolerances
from safe_smpc.rmpc import BackupResult, RmpcSynthesis, backup_control, backup_feasible, backup_feasible_many
from safe_smpc.smpc import SmpcResult, SmpcSynthesis, smpc_control


class Mode(str, enum.Enum):
    STOCHASTIC = "Stochastic"
    BACKUP = "Backup"


class Reason(str, enum.Enum):
    SMPC_ACCEPTED = "SmpcAccepted"
    SMPC_INFEASIBLE = "SmpcInfeasible"
    SAFETY_CHECK_FAILED = "SafetyCheckFailed"


@dataclass(frozen=True)
class ModeDecision:
    mode: Mode
    u: np.ndarray
    reason: Reason
    smpc_nominal_next: np.ndarray | None
    checks: tuple = ()
    solver_calls: int = 1
    backup: BackupResult | None = field(default=None, repr=False)
    smpc: SmpcResult | None = field(default=None, repr=False)

    @property
    def backup_nominal_next(self) -> np.ndarray | None:
        """Nominal state to carry into the next step when the backup stays engaged."""
        return None if self.backup is None else self.backup.nominal_next


def disturbance_vertices(W: Polytope, vertices=None) -> np.ndarray:
    if vertices is not None:
        return np.atleast_2d(np.asarray(vertices, dtype=float))
    if W.dim > 2:
        raise VertexEnumerationUnavailable("supply the vertices of W for dim > 2")
    return W.vertices


def safety_check_detail(nominal_next, rmpc: RmpcSynthesis, W: Polytope | None = None,
                        vertices=None) -> np.ndarray:
    """Backup feasibility at ``nominal_next + w`` for every vertex ``w`` of W.

    ``W`` defaults to the state-coordinate disturbance set of the synthesis.
    """
    W = rmpc.W_state if W is None else W
    V = disturbance_vertices(W, vertices)
    return backup_feasible_many(np.asarray(nominal_next, dtype=float) + V, rmpc)


def safety_check(nominal_next, rmpc: RmpcSynthesis, W: Polytope | None = None,
                 vertices=None) -> bool:
    """Whether ``nominal_next`` lies in X_0 minus W.

    X_0 is convex, so it suffices that every vertex of nominal_next + W is in it.
    """
    return bool(np.all(safety_check_detail(nominal_next, rmpc, W, vertices)))


def safe_step(x, smpc: SmpcSynthesis, rmpc: RmpcSynthesis,
              tolerances: SolverTolerances = DEFAULT_TOLERANCES,
              nominal=None, v_init=None, check_start: bool = True,
              nu_init=None) -> ModeDecision:
    """One step of the safe SMPC algorithm.

    ``nominal`` is the carried backup nominal state when the previous step
    was in backup mode (``ModeDecision.backup_nominal_next``); without it the
    state itself must admit a fresh backup plan.  ``v_init`` and ``nu_init``
    are warm starts for the backup and stochastic problems.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if check_start and nominal is None and not backup_feasible(x, rmpc):
        raise UnsafeStart(f"backup problem infeasible at {x.tolist()}")

    res = smpc_control(x, smpc, tolerances, nu_init=nu_init)
    calls = 1
    if res.feasible:
        checks = safety_check_detail(res.nominal_next, rmpc)
        if checks.all():
            return ModeDecision(Mode.STOCHASTIC, res.u_first, Reason.SMPC_ACCEPTED,
                                res.nominal_next, tuple(bool(c) for c in checks), calls, smpc=res)
        reason, nxt, checks = Reason.SAFETY_CHECK_FAILED, res.nominal_next, tuple(bool(c) for c in checks)
    else:
        reason, nxt, checks = Reason.SMPC_INFEASIBLE, None, ()

    b = backup_control(x, rmpc, tolerances, nominal=nominal, v_init=v_init)
    calls += 1
    if not b.feasible:
        raise InfeasibleController(f"backup problem infeasible at {x.tolist()} ({b.status.value})")
    return ModeDecision(Mode.BACKUP, b.u_first, reason, nxt, checks, calls, b, res)
