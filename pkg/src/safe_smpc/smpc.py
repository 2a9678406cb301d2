"""Stochastic MPC with Gaussian chance-constraint tightening.

The input is parameterized as ``u = K x + nu``.  Splitting the state into a
nominal part and an error ``e+ = (A + BK) e + G w`` gives error covariances
``Sigma_{k+1} = Phi Sigma_k Phi' + G Sigma_w G'`` with ``Sigma_0 = 0``, and
each state constraint ``a'x <= b`` held with probability ``beta`` becomes
the deterministic constraint ``a'z_k <= b - gamma_k`` on the nominal
prediction, with ``gamma_k = sqrt(2 a' Sigma_k a) erfinv(2 beta - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from safe_smpc.errors import BetaOutOfRange, DimensionMismatch
from safe_smpc.polytope import Polytope, canonicalize
from safe_smpc.qp import QpProblem, QpSolution, SolverTolerances, DEFAULT_TOLERANCES, solve_qp
from safe_smpc.system import LinearSystem


def _erfinv_guess(y: float) -> float:
    # Giles' single-precision approximation, used only as a Newton start
    w = -math.log((1.0 - y) * (1.0 + y))
    if w < 5.0:
        w -= 2.5
        p = 2.81022636e-08
        for c in (3.43273939e-07, -3.5233877e-06, -4.39150654e-06, 0.00021858087,
                  -0.00125372503, -0.00417768164, 0.246640727, 1.50140941):
            p = c + p * w
    else:
        w = math.sqrt(w) - 3.0
        p = -0.000200214257
        for c in (0.000100950558, 0.00134934322, -0.00367342844, 0.00573950773,
                  -0.0076224613, 0.00943887047, 1.00167406, 2.83297682):
            p = c + p * w
    return p * y


def erfinv(y: float) -> float:
    """Inverse error function on (-1, 1), refined by Halley steps on math.erf."""
    y = float(y)
    if not -1.0 < y < 1.0:
        if y in (-1.0, 1.0):
            return math.copysign(math.inf, y)
        raise ValueError(f"erfinv is defined on (-1, 1), got {y}")
    if y == 0.0:
        return 0.0
    x = _erfinv_guess(y)
    two_over_sqrt_pi = 2.0 / math.sqrt(math.pi)
    for _ in range(4):
        err = math.erf(x) - y
        deriv = two_over_sqrt_pi * math.exp(-x * x)
        step = err / deriv
        x -= step / (1.0 + x * step)
        if abs(step) <= 1e-16 * max(1.0, abs(x)):
            break
    return x


def propagate_error_covariance(Phi, Sigma_w, N: int) -> list[np.ndarray]:
    """[Sigma_0, ..., Sigma_N] with Sigma_0 = 0."""
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    Sigma_w = np.atleast_2d(np.asarray(Sigma_w, dtype=float))
    out = [np.zeros_like(Sigma_w)]
    for _ in range(N):
        S = Phi @ out[-1] @ Phi.T + Sigma_w
        out.append(0.5 * (S + S.T))
    return out


def check_beta(beta: float) -> None:
    if not 0.5 <= beta < 1.0:
        raise BetaOutOfRange(f"risk parameter must lie in [0.5, 1), got {beta}")


def tightening_offset(a, Sigma_e, beta: float) -> float:
    check_beta(beta)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    var = float(a @ np.atleast_2d(Sigma_e) @ a)
    return math.sqrt(2.0 * max(var, 0.0)) * erfinv(2.0 * beta - 1.0)


@dataclass(frozen=True, eq=False)
class SmpcSynthesis:
    system: LinearSystem
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N: int
    beta: float
    X: Polytope
    U: Polytope
    Sigma_e: tuple
    # gamma[k, i]: offset of state row i at prediction step k (row 0 unused)
    gamma: np.ndarray
    # condensed problem: cost 1/2 nu'H nu + (F x)'nu + x'Y x,
    # constraints G nu <= h + E x
    H: np.ndarray
    F: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    h: np.ndarray
    E: np.ndarray
    n_state_rows: int
    # nominal input u_0 = K x + nu_0; also z_k = Sx[k] x + Su[k] nu
    Sx: np.ndarray
    Su: np.ndarray

    @property
    def Phi(self) -> np.ndarray:
        return self.system.A + self.system.B @ self.K


def synthesize_smpc(system: LinearSystem, K, Q, R, P, N: int, beta: float,
                    X: Polytope, U: Polytope, Sigma_w) -> SmpcSynthesis:
    """Precompute the tightening sequence and the condensed OCP.

    ``Sigma_w`` is the disturbance covariance in disturbance coordinates; it
    is mapped through ``system.G``.
    """
    check_beta(beta)
    A, B = system.A, system.B
    n, m = system.n, system.m
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Q, R, P = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Q, R, P))
    if K.shape != (m, n) or Q.shape != (n, n) or R.shape != (m, m) or P.shape != (n, n):
        raise DimensionMismatch("K, Q, R, P do not match the system dimensions")
    if X.dim != n or U.dim != m:
        raise DimensionMismatch("constraint sets do not match the system dimensions")
    if N < 1:
        raise ValueError("horizon must be at least 1")
    X, U = canonicalize(X), canonicalize(U)
    Phi = A + B @ K
    Sigma_state = system.G @ np.atleast_2d(Sigma_w) @ system.G.T
    covs = propagate_error_covariance(Phi, Sigma_state, N)
    gamma = np.array([[tightening_offset(a, S, beta) for a in X.A] for S in covs])

    # z_k = Phi^k x + sum_j Phi^(k-1-j) B nu_j
    Sx = np.zeros((N + 1, n, n))
    Su = np.zeros((N + 1, n, N * m))
    Sx[0] = np.eye(n)
    for k in range(N):
        Sx[k + 1] = Phi @ Sx[k]
        Su[k + 1] = Phi @ Su[k]
        Su[k + 1][:, k * m:(k + 1) * m] = B

    nv = N * m
    H = np.zeros((nv, nv))
    F = np.zeros((nv, n))
    Y = np.zeros((n, n))
    for k in range(N):
        # u_k = K z_k + nu_k = Ux x + Uu nu
        Ux = K @ Sx[k]
        Uu = K @ Su[k]
        Uu[:, k * m:(k + 1) * m] += np.eye(m)
        H += Su[k].T @ Q @ Su[k] + Uu.T @ R @ Uu
        F += Su[k].T @ Q @ Sx[k] + Uu.T @ R @ Ux
        Y += Sx[k].T @ Q @ Sx[k] + Ux.T @ R @ Ux
    H += Su[N].T @ P @ Su[N]
    F += Su[N].T @ P @ Sx[N]
    Y += Sx[N].T @ P @ Sx[N]
    H = H + H.T  # 2 * symmetric part: objective is 1/2 nu'H nu
    F = 2.0 * F

    G_rows, h_rows, E_rows = [], [], []
    for k in range(1, N + 1):
        G_rows.append(X.A @ Su[k])
        h_rows.append(X.b - gamma[k])
        E_rows.append(-X.A @ Sx[k])
    n_state_rows = sum(len(h) for h in h_rows)
    for k in range(N):
        Uu = K @ Su[k]
        Uu[:, k * m:(k + 1) * m] += np.eye(m)
        G_rows.append(U.A @ Uu)
        h_rows.append(U.b.copy())
        E_rows.append(-U.A @ K @ Sx[k])

    return SmpcSynthesis(
        system=system, K=K, Q=Q, R=R, P=P, N=N, beta=beta, X=X, U=U,
        Sigma_e=tuple(covs), gamma=gamma,
        H=H, F=F, Y=Y,
        G=np.vstack(G_rows), h=np.concatenate(h_rows), E=np.vstack(E_rows),
        n_state_rows=n_state_rows, Sx=Sx, Su=Su,
    )


def build_smpc_ocp(x, synthesis: SmpcSynthesis, state_constraints: bool = True) -> QpProblem:
    """Condensed QP over nu_0..nu_{N-1} for the current state ``x``.

    With ``state_constraints=False`` only the input rows are kept (the
    fallback used by the pure-SMPC baseline when the tightened problem is
    infeasible).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != synthesis.system.n:
        raise DimensionMismatch(f"state of length {x.size}, expected {synthesis.system.n}")
    s = synthesis
    rows = slice(None) if state_constraints else slice(s.n_state_rows, None)
    return QpProblem(
        H=s.H, f=s.F @ x, A_ineq=s.G[rows], b_ineq=(s.h + s.E @ x)[rows],
        constant=float(x @ s.Y @ x),
    )


@dataclass(frozen=True)
class SmpcResult:
    feasible: bool
    u_first: np.ndarray | None
    nominal_next: np.ndarray | None
    solution: QpSolution
    relaxed: bool = False

    def shifted(self, synthesis: SmpcSynthesis) -> np.ndarray | None:
        """Warm start (nu_1.., 0) for the next step's problem."""
        if not self.feasible:
            return None
        m = synthesis.system.m
        return np.concatenate([self.solution.x_opt[m:], np.zeros(m)])

    def predicted_states(self, synthesis: SmpcSynthesis, x) -> np.ndarray:
        nu = self.solution.x_opt
        return np.array([synthesis.Sx[k] @ x + synthesis.Su[k] @ nu
                         for k in range(synthesis.N + 1)])


def smpc_control(x, synthesis: SmpcSynthesis,
                 tolerances: SolverTolerances = DEFAULT_TOLERANCES,
                 state_constraints: bool = True, nu_init=None) -> SmpcResult:
    """First SMPC input ``K x + nu_0*`` and the undisturbed successor state.

    ``nu_init`` is an optional warm start, used only if it is feasible.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    problem = build_smpc_ocp(x, synthesis, state_constraints)
    sol = solve_qp(problem, tolerances, x_init=nu_init)
    if not sol.optimal:
        return SmpcResult(False, None, None, sol, relaxed=not state_constraints)
    m = synthesis.system.m
    u = synthesis.K @ x + sol.x_opt[:m]
    nxt = synthesis.system.A @ x + synthesis.system.B @ u
    return SmpcResult(True, u, nxt, sol, relaxed=not state_constraints)
