"""Command-line interface: ``safe-smpc {simulate,sets,check}``.

Exit codes: 0 success, 1 configuration error, 2 infeasible start,
3 empty tightened set, 4 failed check.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from safe_smpc.config import load_config, paper_config_path
from safe_smpc.errors import (
    ConfigError,
    EmptyTightenedSet,
    InfeasibleController,
    SafeSmpcError,
    UnsafeStart,
)
from safe_smpc.lqr import lyapunov_decrease, riccati_residual, solve_dare
from safe_smpc.qp import kkt_residuals
from safe_smpc.rmpc import backup_control, backup_feasible, build_backup_ocp, synthesize_rmpc
from safe_smpc.sim import CONTROLLERS, aggregate_rows, run_experiment, trace_rows, write_csv
from safe_smpc.smpc import build_smpc_ocp, check_beta, smpc_control, synthesize_smpc

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE_START = 2
EXIT_EMPTY_SET = 3
EXIT_CHECK_FAILED = 4


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def _err(msg: str) -> None:
    print(f"safe-smpc: {msg}", file=sys.stderr)


def _load(args, **overrides):
    return load_config(args.config, **overrides)


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    overrides = {}
    if args.controller:
        overrides["controller"] = args.controller
    if args.runs is not None:
        overrides["n_runs"] = args.runs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    cfg = _load(args, **overrides)
    if not args.quiet:
        print(f"simulating {cfg.n_runs} run(s) of {cfg.controller}, seed {cfg.seed}", file=sys.stderr)
    report = run_experiment(cfg, workers=args.workers)
    summary = report.summary()
    summary["seed"] = cfg.seed
    summary["n_steps"] = cfg.n_steps
    out = Path(args.out)
    # everything is rendered before the first file is touched
    files = {
        out / "trace.csv": _csv_text(trace_rows(report)),
        out / "aggregate.csv": _csv_text(aggregate_rows(report)),
        out / "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }
    for path, text in files.items():
        atomic_write(path, text)
    if not args.quiet:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _bounds(p, axis: int) -> tuple[float, float]:
    e = np.zeros(p.dim)
    e[axis] = 1.0
    return -p.support(-e), p.support(e)


def cmd_sets(args) -> int:
    cfg = _load(args)
    P = cfg.terminal_cost()
    rs = synthesize_rmpc(cfg.system, cfg.K, cfg.Q, cfg.R, P, cfg.X, cfg.U, cfg.W, cfg.N_b,
                         eps=cfg.mrpi_eps, terminal=cfg.terminal)
    x1_lo, x1_hi = _bounds(rs.X_bar, 0)
    u_lo, u_hi = _bounds(rs.U_bar, 0)
    doc = {
        "Z": rs.Z.to_dict(), "X_bar": rs.X_bar.to_dict(), "U_bar": rs.U_bar.to_dict(),
        "Xf": rs.Xf.to_dict(), "K": rs.K.tolist(), "P": rs.P.tolist(),
        "x1_upper": x1_hi, "u_bounds": [u_lo, u_hi],
        "Z_is_origin": bool(np.all(np.abs(rs.Z.vertices) <= 1e-12)),
    }
    if args.out:
        atomic_write(args.out, json.dumps(doc, indent=2) + "\n")
    print(f"tightened x1 bound: x1 <= {x1_hi:.4f}")
    print(f"tightened input bounds: {u_lo:.4f} <= u <= {u_hi:.4f}")
    if doc["Z_is_origin"]:
        print("tube Z = {0}")
    return EXIT_OK


def run_checks(cfg) -> list[dict]:
    """Invariant suite; each entry has ``name``, ``ok`` and ``detail``."""
    report: list[dict] = []

    def record(name, ok, detail=""):
        report.append({"name": name, "ok": bool(ok), "detail": str(detail)})
        return ok

    try:
        check_beta(cfg.beta)
        record("risk parameter", True, f"beta = {cfg.beta}")
    except SafeSmpcError as exc:
        record("risk parameter", False, f"{type(exc).__name__}: {exc}")
        return report

    A, B = cfg.system.A, cfg.system.B
    lqr = solve_dare(A, B, cfg.Q, cfg.R)
    res = riccati_residual(A, B, cfg.Q, cfg.R, lqr.P)
    record("DARE residual", res <= 1e-8, f"{res:.3g}")
    P = cfg.terminal_cost()
    gap = float(np.max(np.abs(P - lqr.P)))
    record("terminal cost matches DARE", gap <= 0.01 * float(np.max(np.abs(lqr.P))), f"max gap {gap:.3g}")
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, cfg.system.n))
    worst = max(lyapunov_decrease(lqr.P, lqr.Phi, cfg.Q, cfg.R, lqr.K, x) / (x @ x) for x in pts)
    record("Lyapunov descent", worst <= 1e-9, f"max normalized increment {worst:.3g}")

    try:
        rs = synthesize_rmpc(cfg.system, cfg.K, cfg.Q, cfg.R, P, cfg.X, cfg.U, cfg.W, cfg.N_b,
                             eps=cfg.mrpi_eps, terminal=cfg.terminal)
        ss = synthesize_smpc(cfg.system, cfg.K, cfg.Q, cfg.R, P, cfg.N, cfg.beta, cfg.X, cfg.U,
                             cfg.Sigma_w)
    except SafeSmpcError as exc:
        record("synthesis", False, f"{type(exc).__name__}: {exc}")
        return report
    record("synthesis", True)
    bad = rs.invariant_violations()
    record("RPI containment and terminal set", not bad, "; ".join(bad) or "ok")
    record("initial state admits backup plan", backup_feasible(cfg.x0, rs), cfg.x0.tolist())

    tol = cfg.tolerances
    worst_kkt = 0.0
    probes = [cfg.x0, np.zeros(cfg.system.n)] + [0.5 * cfg.x0 + 0.1 * rng.normal(size=cfg.system.n)
                                                  for _ in range(3)]
    for x in probes:
        s = smpc_control(x, ss, tol)
        if s.feasible:
            r = kkt_residuals(build_smpc_ocp(x, ss), s.solution)
            worst_kkt = max(worst_kkt, max(r.values()))
        if backup_feasible(x, rs):
            b = backup_control(x, rs, tol)
            r = kkt_residuals(build_backup_ocp(x, rs), b.solution)
            worst_kkt = max(worst_kkt, max(r.values()))
    record("KKT spot checks", worst_kkt <= tol.kkt_tol, f"max residual {worst_kkt:.3g}")
    return report


def cmd_check(args) -> int:
    cfg = _load(args)
    report = run_checks(cfg)
    print(json.dumps({"checks": report, "ok": all(c["ok"] for c in report)}, indent=2))
    failed = [c for c in report if not c["ok"]]
    if failed:
        _err(f"check failed: {failed[0]['name']} ({failed[0]['detail']})")
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe-smpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("config", nargs="?", default=str(paper_config_path()),
                       help="JSON config (default: bundled benchmark configuration)")

    p = sub.add_parser("simulate", help="run closed-loop Monte Carlo simulations")
    add_config(p)
    p.add_argument("--controller", choices=CONTROLLERS)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="results")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: $SAFE_SMPC_THREADS or CPU count)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sets", help="compute and dump the tube, tightened and terminal sets")
    add_config(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sets)

    p = sub.add_parser("check", help="run the invariant suite")
    add_config(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (UnsafeStart, InfeasibleController) as exc:
        _err(f"infeasible start: {exc}")
        return EXIT_INFEASIBLE_START
    except EmptyTightenedSet as exc:
        _err(f"empty tightened set {exc.set_name}: {exc}")
        return EXIT_EMPTY_SET


if __name__ == "__main__":
    sys.exit(main())
