import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safe_smpc.errors import BetaOutOfRange
from safe_smpc.polytope import Polytope
from safe_smpc.qp import kkt_residuals
from safe_smpc.smpc import (
    build_smpc_ocp,
    erfinv,
    propagate_error_covariance,
    smpc_control,
    synthesize_smpc,
    tightening_offset,
)
from safe_smpc.system import LinearSystem


def erfinv_bisection(y, tol=1e-15):
    lo, hi = -10.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if math.erf(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synth(cfg, **kw):
    args = dict(N=cfg.N, beta=cfg.beta)
    args.update(kw)
    return synthesize_smpc(cfg.system, cfg.K, cfg.Q, cfg.R, cfg.terminal_cost(), args["N"],
                           args["beta"], cfg.X, cfg.U, cfg.Sigma_w)


# --- erfinv ----------------------------------------------------------------


@pytest.mark.parametrize("y", [-0.99, -0.5, 0.0, 0.6, 0.9, 0.99])
def test_erfinv_roundtrip(y):
    assert math.erf(erfinv(y)) == pytest.approx(y, abs=1e-9)


@given(st.floats(min_value=-0.999999, max_value=0.999999))
def test_erfinv_matches_bisection(y):
    x = erfinv(y)
    assert x == pytest.approx(erfinv_bisection(y), rel=1e-10, abs=1e-12)


def test_erfinv_domain():
    assert erfinv(1.0) == math.inf
    with pytest.raises(ValueError):
        erfinv(1.5)


# --- covariance and tightening ---------------------------------------------


def test_covariance_examples(bench_cfg):
    Sw = np.diag([0.06, 0.06])
    covs = propagate_error_covariance(np.zeros((2, 2)), Sw, 4)
    assert np.allclose(covs[0], 0)
    assert all(np.allclose(c, Sw) for c in covs[1:])
    Phi = bench_cfg.system.A + bench_cfg.system.B @ bench_cfg.K
    covs = propagate_error_covariance(Phi, Sw, 2)
    assert np.allclose(covs[1], Sw)
    # explicit 2x2 product
    p = Phi
    m00 = 0.06 * (p[0, 0] ** 2 + p[0, 1] ** 2) + 0.06
    m01 = 0.06 * (p[0, 0] * p[1, 0] + p[0, 1] * p[1, 1])
    m11 = 0.06 * (p[1, 0] ** 2 + p[1, 1] ** 2) + 0.06
    assert np.allclose(covs[2], [[m00, m01], [m01, m11]], atol=1e-15)


def test_tightening_examples():
    assert tightening_offset([1, 0], np.zeros((2, 2)), 0.8) == 0.0
    assert tightening_offset([1, 0], np.eye(2), 0.5) == 0.0
    g = tightening_offset([1, 0], np.diag([0.06, 0.06]), 0.8)
    assert g == pytest.approx(math.sqrt(0.12) * erfinv_bisection(0.6), abs=1e-8)
    assert g == pytest.approx(0.2062, abs=1e-4)


@pytest.mark.parametrize("beta", [0.4, 1.0, 1.2])
def test_beta_out_of_range(beta):
    with pytest.raises(BetaOutOfRange):
        tightening_offset([1, 0], np.eye(2), beta)


def test_gamma_monotone(bench_cfg):
    s = synth(bench_cfg)
    assert np.all(s.gamma >= 0)
    assert np.all(np.diff(s.gamma, axis=0) >= -1e-15)
    betas = [0.55, 0.7, 0.8, 0.9, 0.99]
    vals = [tightening_offset([1, 0], s.Sigma_e[3], b) for b in betas]
    assert np.all(np.diff(vals) > 0)


# --- OCP -------------------------------------------------------------------


def test_origin_is_optimal(bench_cfg):
    s = synth(bench_cfg)
    r = smpc_control(np.zeros(2), s)
    assert r.feasible
    assert np.allclose(r.u_first, 0, atol=1e-10)
    assert np.allclose(r.nominal_next, 0, atol=1e-10)
    assert np.allclose(r.solution.x_opt, 0, atol=1e-10)


def test_single_step_structure(bench_cfg):
    s = synth(bench_cfg, N=1)
    p = build_smpc_ocp(np.zeros(2), s)
    x1_row = np.flatnonzero(np.isclose(s.X.A[:, 0], 1.0) & np.isclose(s.X.A[:, 1], 0.0))[0]
    assert p.b_ineq[x1_row] == pytest.approx(2.8 - s.gamma[1, x1_row])


def test_no_terminal_constraint(bench_cfg):
    s = synth(bench_cfg)
    # state rows are exactly the N tightened copies of X; the rest are input rows
    assert s.n_state_rows == s.N * s.X.n_rows
    assert s.G.shape[0] == s.n_state_rows + s.N * s.U.n_rows


def test_benchmark_initial_state(bench_cfg):
    s = synth(bench_cfg)
    x0 = bench_cfg.x0
    r = smpc_control(x0, s)
    assert r.feasible
    assert abs(r.u_first[0]) <= 0.2 + 1e-9
    p = build_smpc_ocp(x0, s)
    assert max(kkt_residuals(p, r.solution).values()) <= 1e-6
    assert r.u_first == pytest.approx(s.K @ x0 + r.solution.x_opt[:1])
    assert r.nominal_next == pytest.approx(bench_cfg.system.A @ x0 + bench_cfg.system.B @ r.u_first)


def test_infeasible_state_flagged(bench_cfg):
    s = synth(bench_cfg)
    r = smpc_control(np.array([9.0, 9.0]), s)
    assert not r.feasible and r.u_first is None


def test_warm_start_same_optimum(bench_cfg):
    s = synth(bench_cfg)
    r0 = smpc_control(bench_cfg.x0, s)
    x1 = r0.nominal_next
    cold = smpc_control(x1, s)
    warm = smpc_control(x1, s, nu_init=r0.shifted(s))
    assert np.allclose(cold.solution.x_opt, warm.solution.x_opt, atol=1e-8)


def test_chance_constraint_oracle(bench_cfg):
    """Empirical one-step violation frequency with untruncated Gaussian draws."""
    s = synth(bench_cfg)
    rng = np.random.default_rng(3)
    sysm = bench_cfg.system
    L = np.linalg.cholesky(bench_cfg.Sigma_w)
    # states where the first tightened x1 row is active
    hits = 0
    total = 0
    for x2 in (2.0, 3.0, 4.0):
        x = np.array([2.0, x2])
        r = smpc_control(x, s)
        if not r.feasible or r.nominal_next[0] < 2.8 - s.gamma[1, 0] - 1e-6:
            continue
        w = rng.standard_normal((10_000, 2)) @ L.T
        nxt = r.nominal_next + w @ sysm.G.T
        hits += int(np.sum(nxt[:, 0] > 2.8))
        total += 10_000
    assert total >= 30_000
    assert hits / total <= 1 - bench_cfg.beta + 0.03


def test_dimension_checks(bench_cfg):
    with pytest.raises(ValueError):
        synthesize_smpc(bench_cfg.system, bench_cfg.K, bench_cfg.Q, bench_cfg.R,
                        bench_cfg.terminal_cost(), 0, 0.8, bench_cfg.X, bench_cfg.U,
                        bench_cfg.Sigma_w)
    sys1 = LinearSystem([[0.5]], [[1.0]])
    with pytest.raises(ValueError):
        synthesize_smpc(sys1, bench_cfg.K, [[1.0]], [[1.0]], [[1.0]], 3, 0.8,
                        Polytope.box(1.0, 1), Polytope.box(1.0, 1), [[0.01]])
