"""Discrete-time LQR synthesis.

Sign convention: the control law is ``u = K x`` and the closed loop is
``A + B K``.  The returned gain is therefore the *negated* textbook gain,
``K = -(R + B'PB)^{-1} B'PA``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safe_smpc.errors import DimensionMismatch, NotStabilizable
from safe_smpc.polytope import spectral_radius


@dataclass(frozen=True)
class LqrSynthesis:
    K: np.ndarray
    P: np.ndarray
    Phi: np.ndarray


def riccati_residual(A, B, Q, R, P) -> float:
    AtPB = A.T @ P @ B
    res = A.T @ P @ A - P - AtPB @ np.linalg.solve(R + B.T @ P @ B, AtPB.T) + Q
    return float(np.max(np.abs(res)))


def lqr_gain(A, B, R, P) -> np.ndarray:
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def solve_dare(A, B, Q, R, rtol: float = 1e-12, max_iter: int = 10_000) -> LqrSynthesis:
    """Solve the DARE by the fixed-point (value) iteration

        P <- A'PA - A'PB (R + B'PB)^{-1} B'PA + Q

    started from P = Q.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise DimensionMismatch("inconsistent A, B, Q, R dimensions")
    if np.max(np.abs(Q - Q.T)) > 1e-12 or np.min(np.linalg.eigvalsh(Q)) < -1e-12:
        raise ValueError("Q must be symmetric positive semidefinite")
    if np.max(np.abs(R - R.T)) > 1e-12 or np.min(np.linalg.eigvalsh(R)) <= 0:
        raise ValueError("R must be symmetric positive definite")

    P = Q.copy()
    for _ in range(max_iter):
        AtPB = A.T @ P @ B
        # divergence surfaces as NotStabilizable below
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = A.T @ P @ A - AtPB @ np.linalg.solve(R + B.T @ P @ B, AtPB.T) + Q
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise NotStabilizable("Riccati iteration diverged")
        done = np.max(np.abs(P_next - P)) <= rtol * max(1.0, np.max(np.abs(P_next)))
        P = P_next
        if done:
            break
    else:
        raise NotStabilizable(f"Riccati iteration did not converge in {max_iter} steps")

    K = lqr_gain(A, B, R, P)
    Phi = A + B @ K
    if spectral_radius(Phi) >= 1.0:
        raise NotStabilizable(f"closed loop spectral radius {spectral_radius(Phi):.6g} >= 1")
    return LqrSynthesis(K=K, P=P, Phi=Phi)


def lyapunov_decrease(P, Phi, Q, R, K, x) -> float:
    """V_f(Phi x) - V_f(x) + x'(Q + K'RK)x; nonpositive when the terminal cost is valid."""
    x = np.asarray(x, dtype=float)
    xn = Phi @ x
    return float(xn @ P @ xn - x @ P @ x + x @ (Q + K.T @ R @ K) @ x)
