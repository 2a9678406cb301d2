from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safe_smpc.errors import DimensionMismatch
from safe_smpc.polytope import Polytope, affine_map, canonicalize


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """x+ = A x + B u + G w."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n:
            raise DimensionMismatch(f"A {A.shape} and B {B.shape} are inconsistent")
        G = np.eye(n) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float))
        if G.shape[0] != n:
            raise DimensionMismatch(f"G has {G.shape[0]} rows, expected {n}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", G)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, x, u, w=None) -> np.ndarray:
        nxt = self.A @ x + self.B @ np.atleast_1d(u)
        if w is not None:
            nxt = nxt + self.G @ w
        return nxt


@dataclass(frozen=True, eq=False)
class DisturbanceModel:
    """w ~ N(0, Sigma_w) truncated to the polytope W."""

    Sigma_w: np.ndarray
    W: Polytope

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma_w, dtype=float))
        if S.shape != (self.W.dim, self.W.dim):
            raise DimensionMismatch(f"Sigma_w {S.shape} does not match W of dim {self.W.dim}")
        if np.max(np.abs(S - S.T)) > 1e-12 or np.min(np.linalg.eigvalsh(S)) < -1e-12:
            raise ValueError("Sigma_w must be symmetric positive semidefinite")
        object.__setattr__(self, "Sigma_w", S)

    def state_covariance(self, G) -> np.ndarray:
        """Covariance of G w in state coordinates."""
        return G @ self.Sigma_w @ G.T

    def state_set(self, G) -> Polytope:
        """G W in state coordinates."""
        G = np.atleast_2d(G)
        if G.shape[0] == G.shape[1] and np.allclose(G, np.eye(G.shape[0])):
            return canonicalize(self.W)
        return affine_map(self.W, G)
