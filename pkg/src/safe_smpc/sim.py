"""Closed-loop Monte Carlo simulation of the three controllers.

Disturbances are drawn from a counter-based generator keyed by
``(seed, step)``, so a run is reproducible on its own and runs can be
distributed over processes in any order.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from safe_smpc.errors import InfeasibleController, RejectionStall, UnsafeStart
from safe_smpc.lqr import solve_dare
from safe_smpc.polytope import Polytope
from safe_smpc.qp import DEFAULT_TOLERANCES, SolverTolerances
from safe_smpc.rmpc import RmpcSynthesis, backup_control, backup_feasible, synthesize_rmpc
from safe_smpc.safety import Mode, safe_step
from safe_smpc.smpc import SmpcSynthesis, smpc_control, synthesize_smpc
from safe_smpc.system import LinearSystem

CONTROLLERS = ("rmpc", "smpc", "safe", "autonomous")
DISTURBANCES = ("gaussian", "vertex", "zero")
VIOLATION_TOL = 1e-9
MAX_REJECTIONS = 100_000
THREADS_ENV = "SAFE_SMPC_THREADS"

_TWO_PI = 2.0 * math.pi
_U53 = 2.0 ** -53


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    system: LinearSystem
    Sigma_w: np.ndarray
    W: Polytope
    X: Polytope
    U: Polytope
    N: int
    N_b: int
    beta: float
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    P: np.ndarray | None = None  # DARE solution when omitted
    n_runs: int = 1
    n_steps: int = 80
    seed: int = 0
    controller: str = "safe"
    mrpi_eps: float = 1e-3
    terminal: str = "control_invariant"
    disturbance: str = "gaussian"
    tolerances: SolverTolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.disturbance not in DISTURBANCES:
            raise ValueError(f"disturbance must be one of {DISTURBANCES}, got {self.disturbance!r}")
        if self.n_steps < 1 or self.n_runs < 1:
            raise ValueError("n_steps and n_runs must be at least 1")
        for name in ("Sigma_w", "K", "Q", "R"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.P is not None:
            object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=float)))

    def with_(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    def terminal_cost(self) -> np.ndarray:
        if self.P is not None:
            return self.P
        return solve_dare(self.system.A, self.system.B, self.Q, self.R).P


@dataclass(frozen=True, eq=False)
class Syntheses:
    smpc: SmpcSynthesis | None
    rmpc: RmpcSynthesis | None


def build_syntheses(config: ExperimentConfig) -> Syntheses:
    """Controller syntheses needed by ``config.controller``."""
    c = config
    P = c.terminal_cost()
    smpc = rmpc = None
    if c.controller in ("smpc", "safe"):
        smpc = synthesize_smpc(c.system, c.K, c.Q, c.R, P, c.N, c.beta, c.X, c.U, c.Sigma_w)
    if c.controller in ("rmpc", "safe"):
        rmpc = synthesize_rmpc(c.system, c.K, c.Q, c.R, P, c.X, c.U, c.W, c.N_b,
                               eps=c.mrpi_eps, terminal=c.terminal)
    return Syntheses(smpc, rmpc)


# ---------------------------------------------------------------------------
# disturbances


def _uniforms(bitgen: np.random.Philox, k: int) -> np.ndarray:
    # 53-bit uniforms on (0, 1]
    raw = bitgen.random_raw(k)
    return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * _U53


def standard_normals(bitgen: np.random.Philox, k: int) -> np.ndarray:
    """Box-Muller transform of the generator's raw output."""
    pairs = (k + 1) // 2
    u = _uniforms(bitgen, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = _TWO_PI * u[1::2]
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()[:k]


def covariance_factor(Sigma) -> np.ndarray:
    """L with L L' = Sigma; PSD matrices fall back to a symmetric square root."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(Sigma)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def step_generator(seed: int, step: int) -> np.random.Philox:
    return np.random.Philox(key=np.array([seed, step], dtype=np.uint64))


def sample_disturbance(bitgen: np.random.Philox, Sigma_w, W: Polytope, L=None,
                       batch: int = 64) -> np.ndarray:
    """One draw of N(0, Sigma_w) conditioned on W, by rejection."""
    L = covariance_factor(Sigma_w) if L is None else L
    q = L.shape[0]
    if not np.any(L):
        return np.zeros(q)
    attempts = 0
    while attempts < MAX_REJECTIONS:
        k = min(batch, MAX_REJECTIONS - attempts)
        w = standard_normals(bitgen, k * q).reshape(k, q) @ L.T
        ok = np.all(w @ W.A.T <= W.b, axis=1)
        if ok.any():
            return w[int(np.argmax(ok))]
        attempts += k
    raise RejectionStall(f"no sample accepted in {MAX_REJECTIONS} attempts")


def sample_vertex(bitgen: np.random.Philox, vertices: np.ndarray) -> np.ndarray:
    i = int(bitgen.random_raw() % np.uint64(len(vertices)))
    return vertices[i].copy()


class DisturbanceStream:
    """Disturbance sequence of one run; ``draw(t)`` depends only on (seed, t)."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.seed = int(seed)
        self.kind = config.disturbance
        self.Sigma_w = config.Sigma_w
        self.W = config.W
        self.L = covariance_factor(config.Sigma_w)
        self.vertices = config.W.vertices if self.kind == "vertex" else None

    def draw(self, t: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(self.L.shape[0])
        bitgen = step_generator(self.seed, t)
        if self.kind == "vertex":
            return sample_vertex(bitgen, self.vertices)
        return sample_disturbance(bitgen, self.Sigma_w, self.W, self.L)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class SimulationTrace:
    run: int
    seed: int
    Q: np.ndarray
    R: np.ndarray
    states: np.ndarray  # (n_steps + 1, n)
    inputs: np.ndarray  # (n_steps, m)
    disturbances: np.ndarray  # (n_steps, q)
    modes: list
    J_b_star: np.ndarray  # nan where the backup was not solved
    solver_calls: np.ndarray
    violated: np.ndarray  # per state, x_0 never counted
    relaxed: np.ndarray  # pure-SMPC steps solved without state constraints
    margins: np.ndarray = field(default=None)  # b - A x per state and row of X

    @property
    def J_sim(self) -> float:
        x, u = self.states[1:], self.inputs
        return float(np.einsum("ki,ij,kj->", x, self.Q, x) + np.einsum("ki,ij,kj->", u, self.R, u))

    @property
    def violation_count(self) -> int:
        return int(self.violated.sum())

    @property
    def backup_steps(self) -> int:
        return sum(m == Mode.BACKUP.value for m in self.modes)

    @property
    def mode_histogram(self) -> dict:
        out: dict = {}
        for m in self.modes:
            out[m] = out.get(m, 0) + 1
        return out


def rollout(config: ExperimentConfig, run: int = 0, syntheses: Syntheses | None = None,
            stream: DisturbanceStream | None = None) -> SimulationTrace:
    """Simulate one closed-loop run of ``config.controller``."""
    c = config
    syn = build_syntheses(c) if syntheses is None else syntheses
    seed = c.seed + run
    stream = DisturbanceStream(c, seed) if stream is None else stream
    system, tol = c.system, c.tolerances
    n, m = system.n, system.m
    T = c.n_steps

    x = c.x0.copy()
    if c.controller in ("rmpc", "safe") and not backup_feasible(x, syn.rmpc):
        raise UnsafeStart(f"initial state {x.tolist()} admits no backup plan")

    states = np.zeros((T + 1, n))
    inputs = np.zeros((T, m))
    dists = np.zeros((T, system.G.shape[1]))
    J_b = np.full(T, np.nan)
    calls = np.zeros(T, dtype=int)
    relaxed = np.zeros(T, dtype=bool)
    modes = []
    states[0] = x
    nominal = v_init = nu_init = None

    for t in range(T):
        if c.controller == "autonomous":
            u = np.zeros(m)
            mode = "Autonomous"
        elif c.controller == "smpc":
            res = smpc_control(x, syn.smpc, tol, nu_init=nu_init)
            calls[t] = 1
            if not res.feasible:
                res = smpc_control(x, syn.smpc, tol, state_constraints=False)
                calls[t] = 2
                relaxed[t] = True
                if not res.feasible:
                    raise InfeasibleController(f"input-constrained SMPC infeasible at {x.tolist()}")
            u = res.u_first
            nu_init = None if res.relaxed else res.shifted(syn.smpc)
            mode = Mode.STOCHASTIC.value
        elif c.controller == "rmpc":
            b = backup_control(x, syn.rmpc, tol, nominal=nominal, v_init=v_init)
            calls[t] = 1
            if not b.feasible:
                raise InfeasibleController(f"backup problem infeasible at {x.tolist()}")
            u, J_b[t] = b.u_first, b.value
            nominal, v_init = b.nominal_next, b.shifted(syn.rmpc)
            mode = Mode.BACKUP.value
        else:
            d = safe_step(x, syn.smpc, syn.rmpc, tol, nominal=nominal, v_init=v_init,
                          check_start=False, nu_init=nu_init)
            calls[t] = d.solver_calls
            u = d.u
            mode = d.mode.value
            nu_init = d.smpc.shifted(syn.smpc) if d.smpc is not None else None
            if d.mode is Mode.BACKUP:
                J_b[t] = d.backup.value
                nominal, v_init = d.backup.nominal_next, d.backup.shifted(syn.rmpc)
            else:
                nominal = v_init = None
        w = stream.draw(t)
        inputs[t], dists[t] = u, w
        modes.append(mode)
        x = system.step(x, u, w)
        states[t + 1] = x

    margins = c.X.b[None, :] - states @ c.X.A.T
    violated = np.any(margins < -VIOLATION_TOL, axis=1)
    violated[0] = False
    return SimulationTrace(run, seed, c.Q, c.R, states, inputs, dists, modes, J_b, calls,
                           violated, relaxed, margins)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class AggregateReport:
    controller: str
    traces: list

    @property
    def costs(self) -> np.ndarray:
        return np.array([tr.J_sim for tr in self.traces])

    @property
    def avg_cost(self) -> float:
        return float(self.costs.mean())

    @property
    def avg_violations(self) -> float:
        return float(np.mean([tr.violation_count for tr in self.traces]))

    @property
    def mode_histogram(self) -> dict:
        out: dict = {}
        for tr in self.traces:
            for k, v in tr.mode_histogram.items():
                out[k] = out.get(k, 0) + v
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "runs": len(self.traces),
            "avg_cost": self.avg_cost,
            "avg_violations": self.avg_violations,
            "mode_histogram": self.mode_histogram,
            "relaxed_steps": int(sum(tr.relaxed.sum() for tr in self.traces)),
        }


def default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


_WORKER: dict = {}


def _init_worker(config, syntheses):
    _WORKER["config"] = config
    _WORKER["syn"] = syntheses


def _run_one(run: int) -> SimulationTrace:
    return rollout(_WORKER["config"], run, _WORKER["syn"])


def run_experiment(config: ExperimentConfig, n_runs: int | None = None,
                   workers: int | None = None, syntheses: Syntheses | None = None) -> AggregateReport:
    """``n_runs`` rollouts with seeds ``config.seed + i``, reduced in run order."""
    n_runs = config.n_runs if n_runs is None else n_runs
    syn = build_syntheses(config) if syntheses is None else syntheses
    workers = default_workers() if workers is None else workers
    if workers <= 1 or n_runs == 1:
        traces = [rollout(config, i, syn) for i in range(n_runs)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, n_runs), initializer=_init_worker,
                                 initargs=(config, syn)) as pool:
            traces = list(pool.map(_run_one, range(n_runs), chunksize=max(1, n_runs // (4 * workers))))
    return AggregateReport(config.controller, traces)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else "%.17g" % v
    return str(v)


def _names(prefix: str, k: int) -> list[str]:
    return [prefix] if k == 1 and prefix == "u" else [f"{prefix}{i + 1}" for i in range(k)]


def trace_rows(report: AggregateReport):
    tr0 = report.traces[0]
    n, m, q = tr0.states.shape[1], tr0.inputs.shape[1], tr0.disturbances.shape[1]
    header = (["run", "t"] + _names("x", n) + _names("u", m) + _names("w", q)
              + ["mode", "violated", "J_b_star", "solver_calls"])
    yield header
    for tr in report.traces:
        T = len(tr.inputs)
        for t in range(T + 1):
            if t < T:
                tail = (list(tr.inputs[t]) + list(tr.disturbances[t])
                        + [tr.modes[t], tr.violated[t], tr.J_b_star[t], tr.solver_calls[t]])
            else:
                tail = [""] * (m + q) + ["", tr.violated[t], float("nan"), ""]
            yield [_fmt(v) for v in [tr.run, t] + list(tr.states[t]) + tail]


def aggregate_rows(report: AggregateReport):
    yield ["run", "J_sim", "violations", "backup_steps"]
    for tr in report.traces:
        yield [_fmt(v) for v in (tr.run, tr.J_sim, tr.violation_count, tr.backup_steps)]


def write_csv(rows, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
