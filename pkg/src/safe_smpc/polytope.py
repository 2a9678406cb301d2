"""Polytopes in halfspace representation {x : A x <= b}.

Exact vertex enumeration (and therefore Minkowski sums and images under
non-invertible maps) is available in one and two dimensions.  Everything
else works in any dimension through support-function LPs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from safe_smpc.errors import (
    DimensionMismatch,
    EmptyResult,
    IterationLimit,
    SingularMap,
    UnboundedOperand,
    UnstablePhi,
    VertexEnumerationUnavailable,
)
from safe_smpc.qp import LpStatus, solve_lp_feasibility, support_lp

FEAS_TOL = 1e-8
SUBSET_TOL = 1e-7
_VERTEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Polytope:
    """Convex polyhedron {x : A x <= b}.

    ``canonical`` marks an irredundant, row-normalized representation.
    ``empty`` is only meaningful on canonical polytopes.
    """

    A: np.ndarray
    b: np.ndarray
    canonical: bool = False
    empty: bool = False

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).ravel()
        if A.ndim == 1:
            A = A.reshape(b.size, -1) if b.size else A.reshape(0, A.size)
        if A.shape[0] != b.size:
            raise DimensionMismatch(f"A has {A.shape[0]} rows but b has {b.size} entries")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_bounds(cls, lb, ub) -> Polytope:
        lb = np.atleast_1d(np.asarray(lb, dtype=float))
        ub = np.atleast_1d(np.asarray(ub, dtype=float))
        if lb.shape != ub.shape:
            raise DimensionMismatch("lower and upper bounds differ in shape")
        if np.any(lb > ub):
            raise ValueError("lower bound exceeds upper bound")
        n = lb.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([ub, -lb]), canonical=True)

    @classmethod
    def box(cls, radius, n: int | None = None) -> Polytope:
        """Centered box; ``radius`` is a scalar (needs ``n``) or per-axis array."""
        r = np.asarray(radius, dtype=float)
        if r.ndim == 0:
            if n is None:
                raise ValueError("dimension required for a scalar radius")
            r = np.full(n, float(r))
        return cls.from_bounds(-r, r)

    @classmethod
    def point(cls, x) -> Polytope:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls.from_bounds(x, x)

    @classmethod
    def origin(cls, n: int) -> Polytope:
        return cls.point(np.zeros(n))

    @classmethod
    def from_vertices(cls, points) -> Polytope:
        """Convex hull of a point cloud (dimension <= 2)."""
        return _hull(np.atleast_2d(np.asarray(points, dtype=float)))

    @classmethod
    def from_dict(cls, data: dict) -> Polytope:
        A = np.asarray(data["A"], dtype=float)
        b = np.asarray(data["b"], dtype=float)
        return cls(A, b)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    # -- basic queries ----------------------------------------------------

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.n_rows}, empty={self.empty})"

    @cached_property
    def is_empty(self) -> bool:
        if self.canonical:
            return self.empty
        if self.n_rows == 0:
            return False
        return not solve_lp_feasibility(self.A, self.b).feasible

    @cached_property
    def is_bounded(self) -> bool:
        if self.is_empty:
            return True
        if self.dim == 2:
            return _normals_positively_span_plane(self.A)
        for c in np.vstack([np.eye(self.dim), -np.eye(self.dim)]):
            if support_lp(self.A, self.b, c).status is LpStatus.UNBOUNDED:
                return False
        return True

    @cached_property
    def vertices(self) -> np.ndarray:
        """Vertices (counter-clockwise in 2D, ascending in 1D)."""
        if self.dim > 2:
            raise VertexEnumerationUnavailable(
                f"vertex enumeration is implemented for dim <= 2, got {self.dim}")
        if self.is_empty:
            return np.zeros((0, self.dim))
        if not self.is_bounded:
            raise UnboundedOperand("vertices of an unbounded polyhedron")
        if self.dim == 1:
            return _interval(self.A, self.b).reshape(-1, 1)
        return _vertices_2d(self.A, self.b, walk=self.canonical)

    def support(self, direction) -> float:
        """h(c) = max c'x over the set; -inf if empty, inf if unbounded."""
        c = np.atleast_1d(np.asarray(direction, dtype=float))
        if c.size != self.dim:
            raise DimensionMismatch(f"direction of length {c.size} for dim {self.dim}")
        if self.dim <= 2 and self.is_bounded:
            V = self.vertices
            return float(np.max(V @ c)) if len(V) else -np.inf
        return support_lp(self.A, self.b, c).value

    def supports(self, directions) -> np.ndarray:
        """Row-wise support values for a stack of directions."""
        D = np.atleast_2d(np.asarray(directions, dtype=float))
        if self.dim <= 2 and self.is_bounded:
            V = self.vertices
            if not len(V):
                return np.full(D.shape[0], -np.inf)
            return np.max(D @ V.T, axis=1)
        return np.array([self.support(d) for d in D])

    def contains(self, x, tol: float = FEAS_TOL) -> bool:
        return contains(self, x, tol)

    def scaled(self, alpha: float) -> Polytope:
        """alpha * P for alpha >= 0."""
        if alpha < 0:
            raise ValueError("scaling factor must be nonnegative")
        return Polytope(self.A, alpha * self.b, canonical=self.canonical and alpha > 0,
                        empty=self.empty)

    def translated(self, x) -> Polytope:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return Polytope(self.A, self.b + self.A @ x, self.canonical, self.empty)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform samples by rejection from the bounding box."""
        if self.is_empty:
            raise EmptyResult("cannot sample an empty set")
        lo = -self.supports(-np.eye(self.dim))
        hi = self.supports(np.eye(self.dim))
        out = []
        while sum(len(o) for o in out) < n:
            cand = rng.uniform(lo, hi, size=(max(4 * n, 64), self.dim))
            out.append(cand[np.all(cand @ self.A.T <= self.b + FEAS_TOL, axis=1)])
        return np.vstack(out)[:n]


# ---------------------------------------------------------------------------
# helpers


def _interval(A, b):
    a = A[:, 0]
    lo, hi = -np.inf, np.inf
    pos, neg = a > 1e-14, a < -1e-14
    if pos.any():
        hi = np.min(b[pos] / a[pos])
    if neg.any():
        lo = np.max(b[neg] / a[neg])
    return np.array([lo, hi]) if abs(hi - lo) > _VERTEX_TOL else np.array([lo])


def _normals_positively_span_plane(A) -> bool:
    norms = np.linalg.norm(A, axis=1)
    A = A[norms > 1e-14]
    if len(A) < 3:
        return False
    ang = np.sort(np.arctan2(A[:, 1], A[:, 0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    return bool(np.max(gaps) < np.pi - 1e-12)


def _order_ccw(P):
    P = _dedupe(P)
    if len(P) <= 2:
        return P
    c = P.mean(axis=0)
    ang = np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0])
    return P[np.argsort(ang, kind="stable")]


def _dedupe(P, tol=_VERTEX_TOL):
    keep = []
    for p in P:
        if not any(np.max(np.abs(p - q)) <= tol * max(1.0, np.max(np.abs(q))) for q in keep):
            keep.append(p)
    return np.array(keep).reshape(-1, P.shape[1])


def _vertices_2d(A, b, walk: bool):
    if walk:
        # facet-adjacency walk: consecutive normals (by angle) meet at a vertex
        ang = np.arctan2(A[:, 1], A[:, 0])
        order = np.argsort(ang, kind="stable")
        A_s, b_s = A[order], b[order]
        A_n, b_n = np.roll(A_s, -1, axis=0), np.roll(b_s, -1)
        det = A_s[:, 0] * A_n[:, 1] - A_s[:, 1] * A_n[:, 0]
        if np.all(np.abs(det) > 1e-12):
            x = (b_s * A_n[:, 1] - b_n * A_s[:, 1]) / det
            y = (A_s[:, 0] * b_n - A_n[:, 0] * b_s) / det
            V = np.column_stack([x, y])
            scale = max(1.0, float(np.max(np.abs(b))))
            if np.all(V @ A.T <= b + 1e-9 * scale):
                return _order_ccw(V)
    # brute force over all row pairs
    i, j = np.triu_indices(A.shape[0], k=1)
    Ai, Aj, bi, bj = A[i], A[j], b[i], b[j]
    det = Ai[:, 0] * Aj[:, 1] - Ai[:, 1] * Aj[:, 0]
    ok = np.abs(det) > 1e-12
    Ai, Aj, bi, bj, det = Ai[ok], Aj[ok], bi[ok], bj[ok], det[ok]
    x = (bi * Aj[:, 1] - bj * Ai[:, 1]) / det
    y = (Ai[:, 0] * bj - Aj[:, 0] * bi) / det
    V = np.column_stack([x, y])
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    V = V[np.all(V @ A.T <= b + 1e-9 * scale, axis=1)]
    return _order_ccw(V)


def _span(a, c) -> float:
    return float(np.hypot(c[0] - a[0], c[1] - a[1]))


def _hull(points: np.ndarray) -> Polytope:
    n = points.shape[1]
    if n > 2:
        raise VertexEnumerationUnavailable("convex hull is implemented for dim <= 2")
    if n == 1:
        lo, hi = float(points.min()), float(points.max())
        return Polytope(np.array([[1.0], [-1.0]]), np.array([hi, -lo]), canonical=True)
    P = _dedupe(points, tol=1e-12)
    if len(P) == 1:
        return Polytope.point(P[0])
    # numerically flat point sets become a segment along the principal axis
    centred = P - P.mean(axis=0)
    _, sv, Vt = np.linalg.svd(centred, full_matrices=False)
    if len(sv) < 2 or sv[1] <= 1e-9 * sv[0]:
        t = centred @ Vt[0]
        P = P[[int(np.argmin(t)), int(np.argmax(t))]]
        if np.linalg.norm(P[1] - P[0]) <= 1e-12:
            return Polytope.point(P[0])
    # Andrew's monotone chain, collinear points dropped
    P = P[np.lexsort((P[:, 1], P[:, 0]))]

    def cross(o, a, c):
        return (a[0] - o[0]) * (c[1] - o[1]) - (a[1] - o[1]) * (c[0] - o[0])

    scale = max(1.0, float(np.max(np.abs(P))))
    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 1e-12 * scale * _span(lower[-2], p):
            lower.pop()
        lower.append(p)
    for p in P[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 1e-12 * scale * _span(upper[-2], p):
            upper.pop()
        upper.append(p)
    H = _drop_flat_vertices(np.array(lower[:-1] + upper[:-1]), _VERTEX_TOL * scale)
    if len(H) == 2:
        # segment: two facets along the line and two end caps
        d = H[1] - H[0]
        d = d / np.linalg.norm(d)
        nrm = np.array([-d[1], d[0]])
        A = np.vstack([nrm, -nrm, d, -d])
        b = np.array([nrm @ H[0], -nrm @ H[0], d @ H[1], -d @ H[0]])
        return Polytope(A, b, canonical=True)
    edges = np.roll(H, -1, axis=0) - H
    normals = np.column_stack([edges[:, 1], -edges[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, H)
    return Polytope(normals, offsets, canonical=True)


def _drop_flat_vertices(H, tol):
    # vertices within tol of the chord joining their neighbours only produce
    # near-parallel facets that make working sets in the QP ill-conditioned
    changed = True
    while changed and len(H) > 3:
        changed = False
        for i in range(len(H)):
            prev, nxt = H[i - 1], H[(i + 1) % len(H)]
            chord = nxt - prev
            length = np.linalg.norm(chord)
            d = H[i] - prev
            dist = abs(chord[0] * d[1] - chord[1] * d[0]) / length if length > 0 else np.linalg.norm(d)
            if dist <= tol:
                H = np.delete(H, i, axis=0)
                changed = True
                break
    return H


def _check_dims(p: Polytope, q: Polytope):
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions differ: {p.dim} vs {q.dim}")


# ---------------------------------------------------------------------------
# operations


def canonicalize(p: Polytope) -> Polytope:
    """Normalize rows, drop zero/duplicate/redundant rows, detect emptiness."""
    if p.canonical:
        return p
    A, b = p.A, p.b
    norms = np.linalg.norm(A, axis=1)
    zero = norms <= 1e-12
    if np.any(b[zero] < -FEAS_TOL):
        return Polytope(A[~zero] if (~zero).any() else A, b[~zero] if (~zero).any() else b,
                        canonical=True, empty=True)
    A, b = A[~zero] / norms[~zero, None], b[~zero] / norms[~zero]
    if len(b) == 0:
        return Polytope(A, b, canonical=True)

    # duplicate normals keep the tightest offset
    key = np.round(A, 10)
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    first: dict[int, int] = {}
    for i, g in enumerate(inverse):
        if g not in first or b[i] < b[first[g]]:
            first[g] = i
    keep = np.sort(np.array(list(first.values())))
    A, b = A[keep], b[keep]

    if not solve_lp_feasibility(A, b).feasible:
        return Polytope(A, b, canonical=True, empty=True)

    if A.shape[1] == 2 and _normals_positively_span_plane(A):
        reduced = _irredundant_2d(A, b)
        if reduced is not None:
            return Polytope(*reduced, canonical=True)

    mask = np.ones(len(b), dtype=bool)
    for i in range(len(b)):
        mask[i] = False
        A_lp = np.vstack([A[mask], A[i]])
        b_lp = np.concatenate([b[mask], [b[i] + 1.0]])
        val = support_lp(A_lp, b_lp, A[i]).value
        if val > b[i] + 1e-9 * max(1.0, abs(b[i])):
            mask[i] = True
    return Polytope(A[mask], b[mask], canonical=True)


def _irredundant_2d(A, b):
    """Rows supporting an edge of positive length; None if the set is degenerate."""
    V = _vertices_2d(A, b, walk=False)
    if len(V) < 3:
        return None
    scale = max(1.0, float(np.max(np.abs(V))))
    tight = np.abs(V @ A.T - b) <= 1e-9 * scale
    keep = tight.sum(axis=0) >= 2
    if keep.sum() < 3:
        return None
    return A[keep], b[keep]


def minkowski_sum(p: Polytope, q: Polytope) -> Polytope:
    _check_dims(p, q)
    if p.dim > 2:
        raise VertexEnumerationUnavailable("Minkowski sum is implemented for dim <= 2")
    if not (p.is_bounded and q.is_bounded):
        raise UnboundedOperand("Minkowski sum requires bounded operands")
    Vp, Vq = p.vertices, q.vertices
    if not len(Vp) or not len(Vq):
        return Polytope(p.A, p.b, canonical=True, empty=True)
    sums = (Vp[:, None, :] + Vq[None, :, :]).reshape(-1, p.dim)
    return _hull(sums)


def pontryagin_diff(p: Polytope, q: Polytope) -> Polytope:
    """{x : x + q in p for all q}; may be empty."""
    _check_dims(p, q)
    if not q.is_bounded:
        raise UnboundedOperand("subtrahend must be bounded")
    if q.is_empty:
        raise EmptyResult("Pontryagin difference with an empty set is undefined here")
    p = canonicalize(p)
    return canonicalize(Polytope(p.A, p.b - q.supports(p.A)))


def affine_map(p: Polytope, M, method: str = "auto") -> Polytope:
    """Image {M x : x in p}.

    ``method`` is ``"inverse"`` (square invertible M, any dimension),
    ``"vertices"`` (bounded p, output dimension <= 2) or ``"auto"``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != p.dim:
        raise DimensionMismatch(f"map has {M.shape[1]} columns for dim {p.dim}")
    square = M.shape[0] == M.shape[1]
    invertible = square and np.linalg.matrix_rank(M) == M.shape[0]
    if method == "inverse" or (method == "auto" and invertible):
        if not invertible:
            raise SingularMap("inverse path requested for a singular map")
        out = Polytope(p.A @ np.linalg.inv(M), p.b)
        return canonicalize(out)
    if method not in ("auto", "vertices"):
        raise ValueError(f"unknown method {method!r}")
    if p.is_empty:
        return Polytope(np.zeros((0, M.shape[0])), np.zeros(0), canonical=True, empty=True)
    return _hull(p.vertices @ M.T)


def intersect(p: Polytope, q: Polytope) -> Polytope:
    _check_dims(p, q)
    return canonicalize(Polytope(np.vstack([p.A, q.A]), np.concatenate([p.b, q.b])))


def contains(p: Polytope, x, tol: float = FEAS_TOL) -> bool:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != p.dim:
        raise DimensionMismatch(f"point of length {x.size} for dim {p.dim}")
    if p.canonical and p.empty:
        return False
    return bool(np.all(p.A @ x <= p.b + tol))


def subset_of(p: Polytope, q: Polytope, tol: float = SUBSET_TOL) -> bool:
    """True iff p is contained in q."""
    _check_dims(p, q)
    if p.is_empty:
        return True
    if q.n_rows == 0:
        return True
    return bool(np.all(p.supports(q.A) <= q.b + tol))


def equal_sets(p: Polytope, q: Polytope, tol: float = SUBSET_TOL) -> bool:
    return subset_of(p, q, tol) and subset_of(q, p, tol)


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def merge_near_parallel_facets(p: Polytope, angle_tol: float = 1e-5) -> Polytope:
    """Outer simplification of a planar polytope.

    Adjacent facets whose normals differ by less than ``angle_tol`` radians
    are merged by dropping the one with the shorter edge, which can only
    enlarge the set.  Other dimensions are returned canonicalized.
    """
    p = canonicalize(p)
    if p.dim != 2 or p.is_empty or not p.is_bounded:
        return p
    A, b = p.A.copy(), p.b.copy()
    while len(b) > 3:
        order = np.argsort(np.arctan2(A[:, 1], A[:, 0]))
        A, b = A[order], b[order]
        ang = np.arctan2(A[:, 1], A[:, 0])
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        i = int(np.argmin(gaps))
        if gaps[i] >= angle_tol:
            break
        j = (i + 1) % len(b)
        V = _vertices_2d(A, b, walk=False)
        def edge(k):
            on = V[np.abs(V @ A[k] - b[k]) <= 1e-9 * max(1.0, abs(b[k]))]
            return np.ptp(on @ np.array([-A[k, 1], A[k, 0]])) if len(on) > 1 else 0.0
        drop = i if edge(i) <= edge(j) else j
        A, b = np.delete(A, drop, axis=0), np.delete(b, drop)
    return canonicalize(Polytope(A, b))


def mrpi_outer(Phi, W: Polytope, eps: float = 1e-3, max_s: int = 200) -> Polytope:
    """Outer eps-approximation of the minimal RPI set of e+ = Phi e + w.

    Finds the smallest s with Phi^s W contained in alpha W and
    alpha <= eps / (eps + M(s)), where M(s) bounds F_s in the infinity norm,
    and returns F_s / (1 - alpha) with F_s = W + Phi W + ... + Phi^(s-1) W.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    n = W.dim
    if Phi.shape != (n, n):
        raise DimensionMismatch(f"Phi has shape {Phi.shape}, W has dim {n}")
    if spectral_radius(Phi) >= 1 - 1e-9:
        raise UnstablePhi(f"spectral radius {spectral_radius(Phi):.6g} >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    W = canonicalize(W)
    if W.is_empty or not W.is_bounded:
        raise ValueError("W must be nonempty and bounded")
    if not contains(W, np.zeros(n)):
        raise ValueError("W must contain the origin")
    if np.all(W.supports(np.vstack([np.eye(n), -np.eye(n)])) <= _VERTEX_TOL):
        return Polytope.origin(n)
    if np.any(W.b <= _VERTEX_TOL):
        raise ValueError("origin must lie in the interior of W")

    axes = np.vstack([np.eye(n), -np.eye(n)])
    # the stopping test needs only support values, so find s before building F_s
    F_support = np.zeros(2 * n)
    Phi_i = np.eye(n)
    stop = None
    for s in range(1, max_s + 1):
        F_support += W.supports(axes @ Phi_i)
        Phi_i = Phi_i @ Phi
        alpha = float(np.max(W.supports(W.A @ Phi_i) / W.b))
        if alpha <= eps / (eps + float(np.max(F_support))):
            stop = s
            break
    if stop is None:
        raise IterationLimit(f"mRPI approximation did not terminate within s = {max_s} "
                             f"(spectral radius {spectral_radius(Phi):.6g})")
    F = Polytope.origin(n)
    Phi_i = np.eye(n)
    for _ in range(stop):
        F = minkowski_sum(F, affine_map(W, Phi_i, method="vertices"))
        Phi_i = Phi_i @ Phi
    return merge_near_parallel_facets(F.scaled(1.0 / (1.0 - alpha)))


def max_invariant_set(Phi, X_c: Polytope, max_iter: int = 500,
                      tol: float = 1e-10) -> Polytope:
    """Maximal positively invariant set of x+ = Phi x inside X_c.

    ``tol`` is the containment tolerance of the convergence test; it bounds
    the invariance slack of the returned set.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    if Phi.shape != (X_c.dim, X_c.dim):
        raise DimensionMismatch(f"Phi has shape {Phi.shape}, X_c has dim {X_c.dim}")
    if spectral_radius(Phi) >= 1 - 1e-9:
        raise UnstablePhi(f"spectral radius {spectral_radius(Phi):.6g} >= 1")
    omega = canonicalize(X_c)
    if omega.is_empty or np.any(omega.b <= FEAS_TOL):
        raise EmptyResult("origin is not in the interior of the constraint set")
    if not omega.is_bounded:
        raise UnboundedOperand("constraint set must be bounded")
    for _ in range(max_iter):
        nxt = intersect(omega, Polytope(omega.A @ Phi, omega.b))
        if subset_of(omega, nxt, tol):
            return nxt
        omega = nxt
    raise IterationLimit(f"invariant set iteration did not converge in {max_iter} steps")


def max_control_invariant_set(A, B, X_c: Polytope, U_c: Polytope,
                              max_iter: int = 500, tol: float = 1e-10) -> Polytope:
    """Maximal control invariant set of x+ = A x + B u, x in X_c, u in U_c.

    Iterates C <- C & Pre(C) with Pre(C) = {x : A x in C + (-B U_c)}; needs
    exact Minkowski sums, hence dim <= 2.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if A.shape != (X_c.dim, X_c.dim) or B.shape[1] != U_c.dim:
        raise DimensionMismatch("A, B do not match the constraint sets")
    C = canonicalize(X_c)
    if C.is_empty:
        raise EmptyResult("state constraint set is empty")
    if not C.is_bounded:
        raise UnboundedOperand("constraint set must be bounded")
    minus_BU = affine_map(canonicalize(U_c), -B, method="vertices")
    for _ in range(max_iter):
        S = minkowski_sum(C, minus_BU)
        nxt = intersect(C, Polytope(S.A @ A, S.b))
        if nxt.is_empty:
            raise EmptyResult("no nonempty control invariant subset exists")
        if subset_of(C, nxt, tol):
            return nxt
        C = nxt
    raise IterationLimit(f"control invariant set iteration did not converge in {max_iter} steps")
