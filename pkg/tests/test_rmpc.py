import numpy as np
import pytest

from safe_smpc.errors import EmptyTightenedSet, UnstablePhi
from safe_smpc.polytope import Polytope, affine_map, equal_sets, subset_of
from safe_smpc.qp import kkt_residuals
from safe_smpc.rmpc import (
    backup_control,
    backup_feasible,
    backup_feasible_many,
    build_backup_ocp,
    inner_feasible_region,
    synthesize_rmpc,
    terminal_input,
)
from safe_smpc.system import LinearSystem


def synth(cfg, **kw):
    args = dict(W=cfg.W, eps=cfg.mrpi_eps, terminal=cfg.terminal, N_b=cfg.N_b, K=cfg.K)
    args.update(kw)
    return synthesize_rmpc(cfg.system, args["K"], cfg.Q, cfg.R, cfg.terminal_cost(), cfg.X, cfg.U,
                           args["W"], args["N_b"], eps=args["eps"], terminal=args["terminal"])


def test_benchmark_tightened_sets(bench_syn):
    rs = bench_syn.rmpc
    assert rs.X_bar.support([1.0, 0.0]) == pytest.approx(1.72, abs=0.05)
    assert -rs.U_bar.support([-1.0]) == pytest.approx(-0.018, abs=0.005)
    assert rs.U_bar.support([1.0]) == pytest.approx(0.025, abs=0.005)
    assert rs.invariant_violations() == []


def test_synthesis_invariants(bench_syn):
    rs = bench_syn.rmpc
    Phi = rs.Phi
    from safe_smpc.polytope import minkowski_sum
    assert subset_of(minkowski_sum(affine_map(rs.Z, Phi, method="vertices"), rs.W_state), rs.Z)
    assert subset_of(rs.Xf, rs.X_bar)
    assert not rs.X_bar.is_empty and not rs.U_bar.is_empty


def test_positive_invariant_terminal_option(bench_cfg):
    rs = synth(bench_cfg, terminal="positive_invariant")
    assert rs.invariant_violations() == []
    assert subset_of(affine_map(rs.Xf, rs.Phi, method="vertices"), rs.Xf)
    assert subset_of(affine_map(rs.Xf, rs.K, method="vertices"), rs.U_bar)
    # with this smaller terminal set the benchmark start needs a longer horizon
    assert not backup_feasible(bench_cfg.x0, rs)


def test_zero_disturbance_no_tightening(bench_cfg):
    rs = synth(bench_cfg, W=Polytope.origin(2))
    assert np.allclose(rs.Z.vertices, 0)
    assert equal_sets(rs.X_bar, bench_cfg.X)
    assert equal_sets(rs.U_bar, bench_cfg.U)


def test_oversized_disturbance(bench_cfg):
    with pytest.raises(EmptyTightenedSet):
        synth(bench_cfg, W=Polytope.box(1.0, 2))


def test_unstable_gain(bench_cfg):
    with pytest.raises(UnstablePhi):
        synth(bench_cfg, K=np.array([[0.5, 0.5]]))


def test_one_dimensional_tube():
    sys1 = LinearSystem([[0.5]], [[1.0]])
    rs = synthesize_rmpc(sys1, [[0.0]], [[1.0]], [[1.0]], [[4.0 / 3.0]], Polytope.box(5.0, 1),
                         Polytope.box(1.0, 1), Polytope.box(0.1, 1), 5, eps=1e-3)
    assert rs.Z.support([1.0]) >= 0.2 - 1e-12
    assert rs.Z.support([1.0]) <= 0.2 + 1e-3
    assert rs.X_bar.support([1.0]) == pytest.approx(5.0 - rs.Z.support([1.0]))


def test_backup_examples(bench_syn):
    rs = bench_syn.rmpc
    b = backup_control(np.zeros(2), rs)
    assert b.feasible
    assert np.allclose(b.u_first, 0, atol=1e-10)
    assert b.value == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(b.nominal_trajectory[0], 0)
    for x in rs.Z.vertices:
        assert backup_control(x, rs).feasible
    assert not backup_control(np.array([5.0, 0.0]), rs).feasible
    assert backup_feasible(np.zeros(2), rs)
    assert not backup_feasible(np.array([100.0, 100.0]), rs)


def test_backup_solution_consistency(bench_cfg, bench_syn):
    rs = bench_syn.rmpc
    x = bench_cfg.x0
    b = backup_control(x, rs)
    assert max(kkt_residuals(build_backup_ocp(x, rs), b.solution).values()) <= 1e-6
    z, v = b.nominal_trajectory, b.nominal_inputs
    A, B = bench_cfg.system.A, bench_cfg.system.B
    for k in range(rs.N_b):
        assert np.allclose(z[k + 1], A @ z[k] + B @ v[k], atol=1e-12)
        assert np.all(rs.U_bar.A @ v[k] <= rs.U_bar.b + 1e-8)
        assert np.all(rs.X_bar.A @ z[k + 1] <= rs.X_bar.b + 1e-8)
    assert rs.Xf.contains(z[-1], tol=1e-8)
    J = sum(z[k] @ rs.Q @ z[k] + v[k] @ rs.R @ v[k] for k in range(rs.N_b)) + z[-1] @ rs.P @ z[-1]
    assert b.value == pytest.approx(J, rel=1e-9)


def test_carried_nominal_requires_tube(bench_syn):
    rs = bench_syn.rmpc
    with pytest.raises(ValueError):
        backup_control(np.array([1.0, 0.0]), rs, nominal=np.zeros(2))


def test_feasibility_monotone_along_rays(bench_syn):
    rs = bench_syn.rmpc
    rng = np.random.default_rng(32)
    for _ in range(32):
        d = rng.normal(size=2)
        d /= np.linalg.norm(d)
        t = np.linspace(0, 12, 60)
        feas = backup_feasible_many(t[:, None] * d, rs, joint_first=False)
        assert feas[0]
        switches = np.count_nonzero(np.diff(feas.astype(int)))
        assert switches <= 1 and (switches == 0 or not feas[-1])


def test_inner_certificate_is_sound(bench_syn):
    rs = bench_syn.rmpc
    inner = inner_feasible_region(rs)
    rng = np.random.default_rng(4)
    pts = rng.uniform([-6, -11], [3, 11], size=(1500, 2))
    lp = backup_feasible_many(pts, rs, joint_first=False, use_certificate=False)
    cert = np.all(pts @ inner.A.T <= inner.b, axis=1)
    assert not np.any(cert & ~lp)
    # the certificate is tight: it misses only a thin band near the boundary
    assert cert.sum() >= 0.99 * lp.sum()


def test_joint_and_single_membership_agree(bench_syn):
    rs = bench_syn.rmpc
    rng = np.random.default_rng(5)
    pts = rng.uniform([-6, -11], [3, 11], size=(60, 2))
    a = backup_feasible_many(pts, rs, joint_first=True, use_certificate=False)
    b = backup_feasible_many(pts, rs, joint_first=False, use_certificate=False)
    assert np.array_equal(a, b)


def test_terminal_input_keeps_terminal_set(bench_syn):
    rs = bench_syn.rmpc
    A, B = rs.system.A, rs.system.B
    for z in rs.Xf.vertices:
        u = terminal_input(rs, z)
        assert rs.U_bar.contains(u, tol=1e-9)
        assert rs.Xf.contains(A @ z + B @ u, tol=1e-7)


def run_backup(rs, x0, steps, disturbance):
    """Closed loop with the carried nominal; yields (x, z0, u, value, result)."""
    x, nominal, v_init = np.array(x0, dtype=float), None, None
    for t in range(steps):
        b = backup_control(x, rs, nominal=nominal, v_init=v_init)
        assert b.feasible, f"backup infeasible at step {t}"
        yield x, b.nominal_trajectory[0], b.u_first, b.value, b
        nominal, v_init = b.nominal_next, b.shifted(rs)
        x = rs.system.step(x, b.u_first, disturbance(t))


def test_recursive_feasibility_vertex_disturbances(bench_cfg, bench_syn):
    rs = bench_syn.rmpc
    V = bench_cfg.W.vertices
    rng = np.random.default_rng(11)
    starts = [bench_cfg.x0, np.array([1.5, -2.0]), np.array([-2.5, 4.0]), np.zeros(2)]
    steps = 0
    for x0 in starts:
        assert backup_feasible(x0, rs)
        for x, z0, u, _, _ in run_backup(rs, x0, 250, lambda t: V[rng.integers(len(V))]):
            steps += 1
            assert bench_cfg.X.contains(x, tol=1e-9)
            assert bench_cfg.U.contains(u, tol=1e-9)
            assert rs.Z.contains(x - z0, tol=1e-7)
    assert steps >= 1000


def test_nominal_value_bound_and_convergence(bench_cfg, bench_syn):
    """With w = 0 the shifted plan bounds the next value.

    J(t+1) <= J(t) - l(z_0, v_0) + V_f(A z_N + B v_N) - V_f(z_N) + l(z_N, v_N).
    For the exact DARE pair the last three terms equal
    (v_N - K z_N)'(R + B'PB)(v_N - K z_N), so the value decreases only where
    the terminal input can follow the LQR law.
    """
    rs = bench_syn.rmpc
    A, B, P = rs.system.A, rs.system.B, rs.P
    prev = None
    xs = []
    for x, z0, u, J, b in run_backup(rs, bench_cfg.x0, 200, lambda t: np.zeros(2)):
        xs.append(x)
        if prev is not None:
            J0, l0, gap = prev
            assert J <= J0 - l0 + gap + 1e-6
        z, v = b.nominal_trajectory, b.nominal_inputs
        zN = z[-1]
        vN = terminal_input(rs, zN)
        zn = A @ zN + B @ vN
        gap = zn @ P @ zn - zN @ P @ zN + zN @ rs.Q @ zN + vN @ rs.R @ vN
        prev = (J, z[0] @ rs.Q @ z[0] + v[0] @ rs.R @ v[0], float(gap))
    norms = np.linalg.norm(xs, axis=1)
    assert np.min(np.flatnonzero(norms < 1e-3)) < 200
