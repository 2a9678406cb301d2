"""Dense convex QP and LP backend.

All optimal control problems in the package are condensed to

    minimize    1/2 x'Hx + f'x
    subject to  A_ineq x <= b_ineq,  A_eq x = b_eq

and solved with a primal active-set method.  The initial feasible point
comes from an LP phase 1; LPs are delegated to HiGHS through scipy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from safe_smpc.errors import DimensionMismatch, NonPsdCost


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass(frozen=True)
class SolverTolerances:
    feas_tol: float = 1e-8
    kkt_tol: float = 1e-6
    psd_floor: float = -1e-8
    regularization: float = 1e-10
    # iteration cap is max_iter_factor * (n + m)
    max_iter_factor: int = 10


DEFAULT_TOLERANCES = SolverTolerances()


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    # added to the reported value only
    constant: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        f = np.atleast_1d(np.asarray(self.f, dtype=float)).ravel()
        n = f.size
        if H.shape != (n, n):
            raise DimensionMismatch(f"H has shape {H.shape}, expected ({n}, {n})")
        A_ineq, b_ineq = _as_constraints(self.A_ineq, self.b_ineq, n, "inequality")
        if (self.A_eq is None) != (self.b_eq is None):
            raise DimensionMismatch("A_eq and b_eq must be given together")
        A_eq, b_eq = _as_constraints(self.A_eq, self.b_eq, n, "equality")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-9:
            raise ValueError("H is not symmetric")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "A_ineq", A_ineq)
        object.__setattr__(self, "b_ineq", b_ineq)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", b_eq)

    @property
    def n(self) -> int:
        return self.f.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x + self.constant)


def _as_constraints(A, b, n, kind):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.asarray(A, dtype=float)
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if A.size == 0:
        A = A.reshape(0, n)
    A = np.atleast_2d(A)
    if A.shape[1] != n:
        raise DimensionMismatch(
            f"{kind} matrix has {A.shape[1]} columns, expected {n}")
    if A.shape[0] != b.size:
        raise DimensionMismatch(
            f"{kind} matrix has {A.shape[0]} rows but {b.size} offsets")
    return A, b


@dataclass(frozen=True)
class QpSolution:
    x_opt: np.ndarray | None
    value: float
    status: QpStatus
    dual_ineq: np.ndarray | None = None
    dual_eq: np.ndarray | None = None
    iterations: int = 0
    # phase-1 optimum (max constraint violation) when infeasible
    infeasibility: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> dict[str, float]:
    """Primal feasibility, dual feasibility, stationarity and complementarity."""
    x, lam = sol.x_opt, sol.dual_ineq
    nu = sol.dual_eq if sol.dual_eq is not None else np.zeros(0)
    slack = problem.A_ineq @ x - problem.b_ineq
    grad = problem.H @ x + problem.f + problem.A_ineq.T @ lam + problem.A_eq.T @ nu
    return {
        "primal": float(np.max(slack, initial=0.0)),
        "equality": float(np.max(np.abs(problem.A_eq @ x - problem.b_eq), initial=0.0)),
        "dual": float(max(0.0, -np.min(lam, initial=0.0))),
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _regularized_hessian(H, tol):
    lam_min = float(np.min(np.linalg.eigvalsh(H))) if H.size else 0.0
    if lam_min < tol.psd_floor:
        raise NonPsdCost(f"cost matrix has eigenvalue {lam_min:.3e}")
    if lam_min <= tol.regularization:
        return H + tol.regularization * np.eye(H.shape[0])
    return H


def _phase_one(problem: QpProblem, tol: SolverTolerances):
    """Feasible point via min t s.t. A x - t <= b, A_eq x = b_eq, t >= 0.

    Returns (x, t*).  x is None when the equality system alone is
    inconsistent (reported with t* = inf).
    """
    n, m = problem.n, problem.A_ineq.shape[0]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([problem.A_ineq, -np.ones((m, 1))]) if m else None
    A_eq = np.hstack([problem.A_eq, np.zeros((problem.A_eq.shape[0], 1))])
    bounds = [(None, None)] * n + [(0.0, None)]
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=problem.b_ineq if m else None,
        A_eq=A_eq if A_eq.shape[0] else None,
        b_eq=problem.b_eq if A_eq.shape[0] else None,
        bounds=bounds,
        method="highs",
    )
    if res.status != 0:
        return None, np.inf
    return res.x[:n], float(res.x[-1])


class _RowBasis:
    """Orthonormal basis of the working-set rows, grown by Gram-Schmidt."""

    def __init__(self, n):
        self.Q = np.zeros((0, n))

    def add_if_independent(self, row) -> bool:
        r = row - self.Q.T @ (self.Q @ row)
        r = r - self.Q.T @ (self.Q @ r)
        norm = np.linalg.norm(r)
        if norm <= 1e-10 * max(1.0, np.linalg.norm(row)):
            return False
        self.Q = np.vstack([self.Q, r / norm])
        return True


def solve_qp(problem: QpProblem,
             tolerances: SolverTolerances = DEFAULT_TOLERANCES,
             x_init: np.ndarray | None = None) -> QpSolution:
    """Primal active-set QP solver.

    ``x_init`` may supply a feasible starting point; if it is not feasible
    to ``feas_tol`` the LP phase 1 is used instead.  Ties in both the
    blocking-constraint and the dropping rule are broken by smallest
    constraint index (Bland).
    """
    tol = tolerances
    H = _regularized_hessian(problem.H, tol)
    f = problem.f
    A, b = problem.A_ineq, problem.b_ineq
    Ae, be = problem.A_eq, problem.b_eq
    n, m, p = problem.n, A.shape[0], Ae.shape[0]

    x = None
    if x_init is not None:
        x_init = np.asarray(x_init, dtype=float)
        if (np.all(A @ x_init - b <= tol.feas_tol)
                and np.all(np.abs(Ae @ x_init - be) <= tol.feas_tol)):
            x = x_init.copy()
    if x is None:
        if m == 0 and p == 0:
            x = np.zeros(n)
        else:
            x, t = _phase_one(problem, tol)
            if x is None or t > tol.feas_tol:
                return QpSolution(None, np.inf, QpStatus.INFEASIBLE, infeasibility=t)

    # working set: independent rows among equalities and active inequalities
    basis = _RowBasis(n)
    eq_rows = Ae[[i for i in range(p) if basis.add_if_independent(Ae[i])]]
    work: list[int] = []
    active = np.flatnonzero(np.abs(A @ x - b) <= tol.feas_tol) if m else []
    for i in active:
        if basis.Q.shape[0] >= n:
            break
        if basis.add_if_independent(A[i]):
            work.append(int(i))

    row_norms = np.linalg.norm(A, axis=1) if m else np.zeros(0)
    max_iter = tol.max_iter_factor * (n + m + p)
    n_eq = eq_rows.shape[0]
    for it in range(1, max_iter + 1):
        W = np.vstack([eq_rows, A[work]]) if work else eq_rows
        g = H @ x + f
        step, mult = _eqp_step(H, g, W)
        scale = max(1.0, float(np.max(np.abs(x), initial=0.0)))

        if np.max(np.abs(step), initial=0.0) <= 1e-11 * scale:
            lam_work = mult[n_eq:]
            negative = [(work[j], j) for j in range(len(work))
                        if lam_work[j] < -1e-12 * max(1.0, np.abs(g).max(initial=0.0))]
            if not negative:
                return _finalize(problem, x, work, it, tol)
            # Bland: drop the smallest constraint index with a negative multiplier
            _, j = min(negative)
            work.pop(j)
            continue

        # ratio test over inequality rows outside the working set; rows whose
        # directional change is at rounding level are treated as parallel
        alpha, blocking = 1.0, None
        if m:
            Ap = A @ step
            candidates = Ap > 1e-9 * row_norms * np.linalg.norm(step)
            candidates[work] = False
            if candidates.any():
                idx = np.flatnonzero(candidates)
                ratios = np.maximum(b[idx] - A[idx] @ x, 0.0) / Ap[idx]
                r_min = ratios.min()
                if r_min < 1.0:
                    alpha = float(r_min)
                    blocking = int(idx[np.flatnonzero(ratios <= r_min + 1e-15)[0]])
        x = x + alpha * step
        if blocking is not None:
            work.append(blocking)
    return QpSolution(x, problem.objective(x), QpStatus.ITERATION_LIMIT, iterations=max_iter)


def _eqp_step(H, g, W):
    """Step and multipliers of min 1/2 p'Hp + g'p s.t. W p = 0 (null-space method).

    A working set spanning the whole space gives an exact zero step, which
    the KKT system only reproduces up to its conditioning.
    """
    n, k = H.shape[0], W.shape[0]
    if k == 0:
        return -np.linalg.solve(H, g), np.zeros(0)
    if k >= n:
        return np.zeros(n), np.linalg.lstsq(W.T, -g, rcond=None)[0]
    Qf, R = np.linalg.qr(W.T, mode="complete")
    Z = Qf[:, k:]
    if Z.shape[1]:
        Hz = Z.T @ H @ Z
        step = -Z @ np.linalg.solve(Hz, Z.T @ g)
    else:
        step = np.zeros(n)
    # W' lambda = -(g + H p)
    mult = np.linalg.lstsq(R[:k], -(Qf[:, :k].T @ (g + H @ step)), rcond=None)[0]
    return step, mult


def _finalize(problem, x, work, iterations, tol):
    # multipliers recomputed against the original (unregularized) Hessian
    n = problem.n
    A, Ae = problem.A_ineq, problem.A_eq
    g = problem.H @ x + problem.f
    W = np.vstack([Ae, A[work]]) if work else Ae
    lam = np.zeros(A.shape[0])
    nu = np.zeros(Ae.shape[0])
    if W.shape[0]:
        mult = np.linalg.lstsq(W.T, -g, rcond=None)[0]
        nu = mult[:Ae.shape[0]]
        lam[work] = np.maximum(mult[Ae.shape[0]:], 0.0)
    return QpSolution(x, problem.objective(x), QpStatus.OPTIMAL, lam, nu, iterations)


# ---------------------------------------------------------------------------
# Linear programming helpers


class LpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass(frozen=True)
class FeasibilityResult:
    status: LpStatus
    witness: np.ndarray | None = None

    @property
    def feasible(self) -> bool:
        return self.status is LpStatus.FEASIBLE


@dataclass(frozen=True)
class SupportResult:
    status: LpStatus
    value: float
    argmax: np.ndarray | None = field(default=None)


def _check_lp_dims(A, b):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if A.shape[0] != b.size:
        raise DimensionMismatch(f"{A.shape[0]} rows but {b.size} offsets")
    return A, b


def solve_lp_feasibility(A, b, A_eq=None, b_eq=None) -> FeasibilityResult:
    """Find a point of {x : A x <= b, A_eq x = b_eq}."""
    A, b = _check_lp_dims(A, b)
    kwargs = {}
    if A_eq is not None:
        A_eq, b_eq = _check_lp_dims(A_eq, b_eq)
        if A_eq.shape[1] != A.shape[1]:
            raise DimensionMismatch("equality and inequality column counts differ")
        kwargs = {"A_eq": A_eq, "b_eq": b_eq}
    n = A.shape[1]
    res = linprog(np.zeros(n), A_ub=A, b_ub=b, bounds=[(None, None)] * n,
                  method="highs", **kwargs)
    if res.status == 0:
        return FeasibilityResult(LpStatus.FEASIBLE, res.x)
    return FeasibilityResult(LpStatus.INFEASIBLE)


def support_lp(A, b, c) -> SupportResult:
    """max c'x over {A x <= b}."""
    A, b = _check_lp_dims(A, b)
    c = np.atleast_1d(np.asarray(c, dtype=float)).ravel()
    if c.size != A.shape[1]:
        raise DimensionMismatch(f"direction has length {c.size}, expected {A.shape[1]}")
    res = linprog(-c, A_ub=A, b_ub=b, bounds=[(None, None)] * c.size, method="highs")
    if res.status == 0:
        return SupportResult(LpStatus.OPTIMAL, float(-res.fun), res.x)
    if res.status == 3:
        return SupportResult(LpStatus.UNBOUNDED, np.inf)
    if res.status == 2:
        return SupportResult(LpStatus.INFEASIBLE, -np.inf)
    raise RuntimeError(f"LP solver failed: {res.message}")
