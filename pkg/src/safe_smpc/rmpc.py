"""Tube-based robust MPC used as the backup controller.

A nominal trajectory ``z+ = A z + B v`` is planned under tightened
constraints and the real state is kept in a tube ``x - z in Z`` by the
feedback ``u = v + K (x - z)``.  A fresh plan starts at ``z_0 = x``; while
the backup stays engaged the nominal state is carried from one step to the
next instead of being reset, which keeps the problem recursively feasible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from safe_smpc.errors import DimensionMismatch, EmptyTightenedSet, UnstablePhi
from safe_smpc.polytope import (
    Polytope,
    affine_map,
    canonicalize,
    contains,
    intersect,
    max_control_invariant_set,
    max_invariant_set,
    minkowski_sum,
    mrpi_outer,
    pontryagin_diff,
    spectral_radius,
    subset_of,
)
from safe_smpc.qp import (
    DEFAULT_TOLERANCES,
    QpProblem,
    QpSolution,
    QpStatus,
    SolverTolerances,
    solve_lp_feasibility,
    solve_qp,
    support_lp,
)
from safe_smpc.system import LinearSystem

# slack allowed when checking that a carried nominal state still has the
# real state inside its tube
TUBE_TOL = 1e-7
# membership tests require this much slack in every constraint row so that a
# point accepted by the LP is also accepted by the QP phase 1
FEASIBILITY_MARGIN = 1e-7
# the inner certificate of X_0 is built with a stricter margin, so any point
# it accepts also passes the LP test
CERTIFICATE_MARGIN = 2 * FEASIBILITY_MARGIN
# largest batch solved as one block-diagonal LP
JOINT_MAX_POINTS = 16


@dataclass(frozen=True, eq=False)
class RmpcSynthesis:
    system: LinearSystem
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N_b: int
    X: Polytope
    U: Polytope
    W_state: Polytope  # G W
    Z: Polytope
    X_bar: Polytope
    U_bar: Polytope
    Xf: Polytope
    terminal: str
    # condensed problem over v = (v_0..v_{N_b-1}) for initial nominal z_0:
    # cost 1/2 v'H v + (F z_0)'v + z_0'Y z_0, constraints G v <= h + E z_0
    H: np.ndarray
    F: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    h: np.ndarray
    E: np.ndarray
    # z_k = Sx[k] z_0 + Sv[k] v
    Sx: np.ndarray
    Sv: np.ndarray

    @property
    def Phi(self) -> np.ndarray:
        return self.system.A + self.system.B @ self.K

    def invariant_violations(self) -> list[str]:
        """Names of the violated synthesis invariants (empty when valid)."""
        bad = []
        Phi = self.Phi
        if not subset_of(minkowski_sum(affine_map(self.Z, Phi, method="vertices"),
                                       self.W_state), self.Z):
            bad.append("tube RPI: Phi Z + W in Z")
        if not subset_of(self.Xf, self.X_bar):
            bad.append("terminal set inside tightened state set")
        if self.terminal == "positive_invariant":
            if not subset_of(affine_map(self.Xf, Phi, method="vertices"), self.Xf):
                bad.append("terminal set invariance")
            if not subset_of(affine_map(self.Xf, self.K, method="vertices"), self.U_bar):
                bad.append("terminal input admissibility")
        elif not all(self._terminal_input_exists(z) for z in self.Xf.vertices):
            bad.append("terminal set control invariance")
        return bad

    @cached_property
    def X0_inner(self) -> Polytope | None:
        """Inner polygon of X_0 used to skip membership LPs (2D systems only)."""
        if self.system.n != 2:
            return None
        return inner_feasible_region(self)

    def _terminal_input_exists(self, z) -> bool:
        A, B = self.system.A, self.system.B
        G = np.vstack([self.Xf.A @ B, self.U_bar.A])
        h = np.concatenate([self.Xf.b - self.Xf.A @ A @ z, self.U_bar.b])
        return solve_lp_feasibility(G, h + 1e-9).feasible


def synthesize_rmpc(system: LinearSystem, K, Q, R, P, X: Polytope, U: Polytope,
                    W: Polytope, N_b: int, eps: float = 1e-3,
                    terminal: str = "control_invariant") -> RmpcSynthesis:
    """Tube, tightened sets, terminal set and condensed backup OCP.

    ``W`` is given in disturbance coordinates and mapped through ``system.G``.
    ``terminal`` selects the maximal control invariant set of the nominal
    dynamics inside the tightened sets, or the maximal positively invariant
    set under ``u = K z``.
    """
    A, B = system.A, system.B
    n, m = system.n, system.m
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Q, R, P = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Q, R, P))
    if K.shape != (m, n) or Q.shape != (n, n) or R.shape != (m, m) or P.shape != (n, n):
        raise DimensionMismatch("K, Q, R, P do not match the system dimensions")
    if X.dim != n or U.dim != m:
        raise DimensionMismatch("constraint sets do not match the system dimensions")
    if N_b < 1:
        raise ValueError("horizon must be at least 1")
    if terminal not in ("control_invariant", "positive_invariant"):
        raise ValueError(f"unknown terminal set kind {terminal!r}")
    Phi = A + B @ K
    if spectral_radius(Phi) >= 1 - 1e-9:
        raise UnstablePhi(f"spectral radius of A + BK is {spectral_radius(Phi):.6g}")

    X, U = canonicalize(X), canonicalize(U)
    W_state = canonicalize(W) if np.allclose(system.G, np.eye(n)) else affine_map(W, system.G)
    Z = mrpi_outer(Phi, W_state, eps)
    X_bar = pontryagin_diff(X, Z)
    if X_bar.is_empty:
        raise EmptyTightenedSet("X_bar", "tightened state set X - Z is empty")
    U_bar = pontryagin_diff(U, affine_map(Z, K, method="vertices"))
    if U_bar.is_empty:
        raise EmptyTightenedSet("U_bar", "tightened input set U - KZ is empty")
    admissible = intersect(X_bar, Polytope(U_bar.A @ K, U_bar.b))
    if admissible.is_empty or not contains(admissible, np.zeros(n), tol=-1e-12):
        raise EmptyTightenedSet("Xf", "origin is not interior to the terminal constraint set")
    if terminal == "control_invariant":
        Xf = max_control_invariant_set(A, B, X_bar, U_bar)
    else:
        Xf = max_invariant_set(Phi, admissible)

    nv = N_b * m
    Sx = np.zeros((N_b + 1, n, n))
    Sv = np.zeros((N_b + 1, n, nv))
    Sx[0] = np.eye(n)
    for k in range(N_b):
        Sx[k + 1] = A @ Sx[k]
        Sv[k + 1] = A @ Sv[k]
        Sv[k + 1][:, k * m:(k + 1) * m] = B
    H = np.zeros((nv, nv))
    F = np.zeros((nv, n))
    Y = np.zeros((n, n))
    for k in range(N_b):
        Ek = np.zeros((m, nv))
        Ek[:, k * m:(k + 1) * m] = np.eye(m)
        H += Sv[k].T @ Q @ Sv[k] + Ek.T @ R @ Ek
        F += Sv[k].T @ Q @ Sx[k]
        Y += Sx[k].T @ Q @ Sx[k]
    H += Sv[N_b].T @ P @ Sv[N_b]
    F += Sv[N_b].T @ P @ Sx[N_b]
    Y += Sx[N_b].T @ P @ Sx[N_b]
    H = H + H.T
    F = 2.0 * F

    # z_0 in X: a fresh plan starts at the real state, which must be admissible
    G_rows = [np.zeros((X.n_rows, nv))]
    h_rows = [X.b]
    E_rows = [-X.A]
    for k in range(1, N_b + 1):
        G_rows.append(X_bar.A @ Sv[k])
        h_rows.append(X_bar.b)
        E_rows.append(-X_bar.A @ Sx[k])
    for k in range(N_b):
        rows = np.zeros((U_bar.n_rows, nv))
        rows[:, k * m:(k + 1) * m] = U_bar.A
        G_rows.append(rows)
        h_rows.append(U_bar.b)
        E_rows.append(np.zeros((U_bar.n_rows, n)))
    G_rows.append(Xf.A @ Sv[N_b])
    h_rows.append(Xf.b)
    E_rows.append(-Xf.A @ Sx[N_b])

    return RmpcSynthesis(
        system=system, K=K, Q=Q, R=R, P=P, N_b=N_b, X=X, U=U, W_state=W_state,
        Z=Z, X_bar=X_bar, U_bar=U_bar, Xf=Xf, terminal=terminal,
        H=H, F=F, Y=Y, G=np.vstack(G_rows), h=np.concatenate(h_rows),
        E=np.vstack(E_rows), Sx=Sx, Sv=Sv,
    )


def build_backup_ocp(z0, synthesis: RmpcSynthesis) -> QpProblem:
    """Condensed nominal OCP over v_0..v_{N_b-1} from the nominal state ``z0``."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if z0.size != synthesis.system.n:
        raise DimensionMismatch(f"state of length {z0.size}, expected {synthesis.system.n}")
    s = synthesis
    return QpProblem(H=s.H, f=s.F @ z0, A_ineq=s.G, b_ineq=s.h + s.E @ z0,
                     constant=float(z0 @ s.Y @ z0))


@dataclass(frozen=True)
class BackupResult:
    status: QpStatus
    u_first: np.ndarray | None
    value: float
    nominal_trajectory: np.ndarray | None  # z_0..z_{N_b}
    nominal_inputs: np.ndarray | None  # v_0..v_{N_b-1}, shape (N_b, m)
    solution: QpSolution

    @property
    def feasible(self) -> bool:
        return self.status is QpStatus.OPTIMAL

    @property
    def nominal_next(self) -> np.ndarray | None:
        """z_1, the nominal state to carry into the next backup step."""
        return None if self.nominal_trajectory is None else self.nominal_trajectory[1]

    def shifted(self, synthesis: RmpcSynthesis) -> np.ndarray | None:
        """Warm start (v_1.., v_N) for the problem from ``nominal_next``.

        ``v_N`` keeps the nominal state in the terminal set when such an
        input is found, and is ``K z_N`` otherwise.
        """
        if not self.feasible:
            return None
        tail = terminal_input(synthesis, self.nominal_trajectory[-1])
        return np.concatenate([self.nominal_inputs[1:].ravel(), tail])


def terminal_input(synthesis: RmpcSynthesis, z) -> np.ndarray:
    """An input in U_bar steering ``z`` into Xf, closest to ``K z`` for one input.

    Falls back to ``K z`` when no such input exists.
    """
    s = synthesis
    A, B = s.system.A, s.system.B
    z = np.asarray(z, dtype=float)
    u_lqr = s.K @ z
    G = np.vstack([s.Xf.A @ B, s.U_bar.A])
    h = np.concatenate([s.Xf.b - s.Xf.A @ A @ z, s.U_bar.b])
    if s.system.m == 1:
        g = G[:, 0]
        lo = np.max(h[g < 0] / g[g < 0], initial=-np.inf)
        hi = np.min(h[g > 0] / g[g > 0], initial=np.inf)
        if np.any((g == 0) & (h < 0)) or lo > hi + 1e-9 * max(1.0, abs(hi)):
            return u_lqr
        if lo > hi:  # empty only by roundoff, on the boundary of Xf
            return np.array([0.5 * (lo + hi)])
        return np.clip(u_lqr, lo, hi)
    res = solve_lp_feasibility(G, h)
    return res.witness if res.feasible else u_lqr


def backup_control(x, synthesis: RmpcSynthesis,
                   tolerances: SolverTolerances = DEFAULT_TOLERANCES,
                   nominal=None, v_init=None) -> BackupResult:
    """Backup input at state ``x``.

    Without ``nominal`` a fresh plan is started at ``z_0 = x``.  With a
    carried nominal state the plan starts there and the tube feedback acts
    on ``x - nominal``, which must lie in ``Z``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = synthesis
    if x.size != s.system.n:
        raise DimensionMismatch(f"state of length {x.size}, expected {s.system.n}")
    z0 = x.copy() if nominal is None else np.atleast_1d(np.asarray(nominal, dtype=float))
    if nominal is not None and not s.Z.contains(x - z0, tol=TUBE_TOL):
        raise ValueError("state is outside the tube around the carried nominal state")
    sol = solve_qp(build_backup_ocp(z0, s), tolerances, x_init=v_init)
    if not sol.optimal:
        return BackupResult(sol.status, None, np.inf, None, None, sol)
    m = s.system.m
    v = sol.x_opt.reshape(s.N_b, m)
    z = np.array([s.Sx[k] @ z0 + s.Sv[k] @ sol.x_opt for k in range(s.N_b + 1)])
    u = v[0] + s.K @ (x - z0)
    return BackupResult(sol.status, u, sol.value, z, v, sol)


def _support_point(synthesis: RmpcSynthesis, d) -> np.ndarray | None:
    s = synthesis
    n = s.system.n
    lifted = np.hstack([-s.E, s.G])
    res = support_lp(lifted, s.h - CERTIFICATE_MARGIN, np.concatenate([d, np.zeros(s.G.shape[1])]))
    return None if res.argmax is None else res.argmax[:n]


def inner_feasible_region(synthesis: RmpcSynthesis, n_dirs: int = 16,
                          max_rounds: int = 20, tol: float = 1e-9) -> Polytope | None:
    """Convex hull of support points of X_0 for a 2D state.

    Each support point comes with a feasible plan, so by convexity every
    point of the hull is feasible.  Edges are refined by querying their
    outward normals until no point moves the hull by more than ``tol``.
    Returns None when X_0 (with the certificate margin) is empty.
    """
    if synthesis.system.n != 2:
        raise ValueError("the inner region is only built for 2D states")
    angles = np.linspace(0.0, 2 * np.pi, n_dirs, endpoint=False)
    pts = [_support_point(synthesis, np.array([np.cos(a), np.sin(a)])) for a in angles]
    if any(p is None for p in pts):
        return None
    pts = np.array(pts)
    for _ in range(max_rounds):
        hull = Polytope.from_vertices(pts)
        if hull.n_rows < 3:
            return None
        new = []
        for a, b in zip(hull.A, hull.b):
            p = _support_point(synthesis, a)
            if p is not None and a @ p > b + tol * max(1.0, abs(b)):
                new.append(p)
        if not new:
            return hull
        pts = np.vstack([pts] + new)
    return Polytope.from_vertices(pts)


def backup_feasible(x, synthesis: RmpcSynthesis) -> bool:
    """Whether a fresh backup plan exists from ``x``, i.e. x in X_0."""
    return bool(backup_feasible_many(np.atleast_2d(x), synthesis).all())


def backup_feasible_many(points, synthesis: RmpcSynthesis, joint_first: bool = True,
                         use_certificate: bool = True) -> np.ndarray:
    """Per-point backup feasibility.

    Points inside the inner certificate ``X0_inner`` are accepted without an
    LP.  For the rest, with ``joint_first`` and at most ``JOINT_MAX_POINTS``
    of them, a single block-diagonal LP is tried; only when it fails are the
    points checked one by one.  Every row
    must hold with slack ``FEASIBILITY_MARGIN``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    s = synthesis
    if points.shape[1] != s.system.n:
        raise DimensionMismatch("points do not match the state dimension")
    out = np.zeros(len(points), dtype=bool)
    inner = s.X0_inner if use_certificate else None
    if inner is not None:
        out = np.all(points @ inner.A.T <= inner.b, axis=1)
    todo = np.flatnonzero(~out)
    if joint_first and 1 < len(todo) <= JOINT_MAX_POINTS:
        joint = solve_lp_feasibility(np.kron(np.eye(len(todo)), s.G),
                                     np.concatenate([s.h - FEASIBILITY_MARGIN + s.E @ points[i]
                                                     for i in todo]))
        if joint.feasible:
            out[todo] = True
            return out
    for i in todo:
        out[i] = solve_lp_feasibility(s.G, s.h - FEASIBILITY_MARGIN + s.E @ points[i]).feasible
    return out
