import math

import numpy as np
import pytest

from safe_smpc.errors import NotStabilizable
from safe_smpc.lqr import lyapunov_decrease, riccati_residual, solve_dare
from safe_smpc.polytope import spectral_radius

A = np.array([[1.0, 0.0075], [-0.143, 0.996]])
B = np.array([[4.798], [0.115]])
Q = np.diag([1.0, 10.0])
R = np.array([[1.0]])


def scalar_fixed_point(a, b, q, r, iters=10_000):
    p = q
    for _ in range(iters):
        p = a * a * p - (a * p * b) ** 2 / (r + b * b * p) + q
    return p


def test_deadbeat_open_loop():
    s = solve_dare([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    assert s.P[0, 0] == pytest.approx(1.0)
    assert s.K[0, 0] == pytest.approx(0.0)


def test_scalar_against_fixed_point():
    s = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert s.P[0, 0] == pytest.approx(scalar_fixed_point(1.0, 1.0, 1.0, 1.0), abs=1e-10)
    assert s.P[0, 0] == pytest.approx((1 + math.sqrt(5)) / 2, abs=1e-10)


def test_benchmark_values():
    s = solve_dare(A, B, Q, R)
    assert np.allclose(np.round(s.P, 2), [[1.91, -5.06], [-5.06, 39.54]])
    assert np.allclose(np.round(s.K, 2), [[-0.29, 0.49]])
    assert riccati_residual(A, B, Q, R, s.P) <= 1e-6
    assert np.allclose(s.P, s.P.T)
    assert np.min(np.linalg.eigvalsh(s.P)) > 0
    assert spectral_radius(s.Phi) < 1


def test_lyapunov_descent_on_samples(rng):
    s = solve_dare(A, B, Q, R)
    for x in rng.uniform(-3, 3, size=(100, 2)):
        assert lyapunov_decrease(s.P, s.Phi, Q, R, s.K, x) <= 1e-8


def test_random_systems(rng):
    for _ in range(30):
        n, m = 3, 2
        A_r = rng.normal(size=(n, n))
        B_r = rng.normal(size=(n, m))
        s = solve_dare(A_r, B_r, np.eye(n), np.eye(m))
        assert riccati_residual(A_r, B_r, np.eye(n), np.eye(m), s.P) <= 1e-6 * max(1, np.abs(s.P).max())
        assert spectral_radius(s.Phi) < 1


def test_not_stabilizable():
    with pytest.raises(NotStabilizable):
        solve_dare([[2.0]], [[0.0]], [[1.0]], [[1.0]])


def test_invalid_weights():
    with pytest.raises(ValueError):
        solve_dare(A, B, Q, [[0.0]])
