import json

import numpy as np
import pytest

from safe_smpc.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_EMPTY_SET,
    EXIT_INFEASIBLE_START,
    EXIT_OK,
    main,
    run_checks,
)
from safe_smpc.config import config_from_dict, load_paper_config, paper_config_path, read_json
from safe_smpc.errors import ConfigError
from safe_smpc.sim import run_experiment


@pytest.fixture
def bench_doc():
    return read_json(paper_config_path())


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def box_doc(r):
    return {"A": [[1, 0], [-1, 0], [0, 1], [0, -1]], "b": [r] * 4}


# --- config ----------------------------------------------------------------


def test_bundled_config_literals():
    cfg = load_paper_config()
    assert np.allclose(cfg.system.A, [[1, 0.0075], [-0.143, 0.996]])
    assert np.allclose(cfg.system.B, [[4.798], [0.115]])
    assert cfg.N == cfg.N_b == 11 and cfg.beta == 0.8
    assert np.allclose(cfg.x0, [-1.3, 3.5])
    assert cfg.n_runs == 100 and cfg.n_steps == 80


@pytest.mark.parametrize("where", ["root", "controller", "tolerances"])
def test_unknown_keys_rejected(bench_doc, where):
    target = bench_doc if where == "root" else bench_doc[where]
    target["surprise"] = 1
    with pytest.raises(ConfigError):
        config_from_dict(bench_doc)


def test_missing_and_malformed(bench_doc, tmp_path):
    del bench_doc["x0"]
    with pytest.raises(ConfigError):
        config_from_dict(bench_doc)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        read_json(bad)
    with pytest.raises(ConfigError):
        read_json(tmp_path / "missing.json")


def test_inconsistent_values(bench_doc):
    bench_doc["controller"]["kind"] = "safe"
    bench_doc["n_steps"] = 0
    with pytest.raises(ConfigError):
        config_from_dict(bench_doc)


# --- sets ------------------------------------------------------------------


def test_sets_output(tmp_path, capsys):
    out = tmp_path / "sets.json"
    assert main(["sets", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert 1.65 <= doc["x1_upper"] <= 1.80
    assert doc["u_bounds"][0] == pytest.approx(-0.018, abs=0.005)
    assert doc["u_bounds"][1] == pytest.approx(0.025, abs=0.005)
    assert f"x1 <= {doc['x1_upper']:.4f}" in text
    assert set(doc) >= {"Z", "X_bar", "U_bar", "Xf", "K", "P"}
    assert not doc["Z_is_origin"]


def test_sets_zero_disturbance(bench_doc, tmp_path, capsys):
    bench_doc["disturbance"]["W"] = box_doc(0.0)
    assert main(["sets", write(tmp_path, bench_doc)]) == EXIT_OK
    assert "Z = {0}" in capsys.readouterr().out


def test_sets_oversized_disturbance(bench_doc, tmp_path, capsys):
    bench_doc["disturbance"]["W"] = box_doc(1.0)
    out = tmp_path / "sets.json"
    assert main(["sets", write(tmp_path, bench_doc), "--out", str(out)]) == EXIT_EMPTY_SET
    assert "empty tightened set" in capsys.readouterr().err
    assert not out.exists()


# --- check -----------------------------------------------------------------


def test_check_bundled_config(capsys):
    assert main(["check"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and all(c["ok"] for c in report["checks"])
    names = {c["name"] for c in report["checks"]}
    assert {"DARE residual", "Lyapunov descent", "RPI containment and terminal set",
            "KKT spot checks"} <= names


def test_check_beta_out_of_range(bench_doc, tmp_path, capsys):
    bench_doc["controller"]["beta"] = 0.4
    assert main(["check", write(tmp_path, bench_doc)]) == EXIT_CHECK_FAILED
    assert "BetaOutOfRange" in capsys.readouterr().err


def test_check_unstable_gain(bench_doc, tmp_path, capsys):
    bench_doc["controller"]["K"] = [[0.5, 0.5]]
    assert main(["check", write(tmp_path, bench_doc)]) == EXIT_CHECK_FAILED
    assert "UnstablePhi" in capsys.readouterr().err


def test_check_zero_gain_fails_quickly(bench_doc):
    # rho(A) = 0.9985 < 1, so K = 0 is stable but far too slow for the tube
    A = np.array(bench_doc["system"]["A"])
    assert max(abs(np.linalg.eigvals(A))) == pytest.approx(0.998535, abs=1e-6)
    bench_doc["controller"]["K"] = [[0.0, 0.0]]
    report = run_checks(config_from_dict(bench_doc))
    failed = [c for c in report if not c["ok"]]
    assert failed[0]["name"] == "synthesis" and "IterationLimit" in failed[0]["detail"]


# --- simulate --------------------------------------------------------------


def sim_args(out, *extra):
    return ["simulate", "--runs", "2", "--steps", "10", "--seed", "7", "--out", str(out),
            "--workers", "1", "--quiet", *extra]


def test_simulate_outputs_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(sim_args(a)) == EXIT_OK
    assert main(sim_args(b, "--workers", "2")) == EXIT_OK
    assert capsys.readouterr().out == ""  # --quiet
    for name in ("trace.csv", "aggregate.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["avg_violations"] == 0
    assert summary["controller"] == "safe" and summary["runs"] == 2
    assert set(summary) >= {"avg_cost", "avg_violations", "mode_histogram"}


def test_simulate_matches_library(tmp_path):
    assert main(sim_args(tmp_path, "--controller", "smpc")) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    cfg = load_paper_config(controller="smpc", n_runs=2, n_steps=10, seed=7)
    assert summary["avg_cost"] == run_experiment(cfg, workers=1).avg_cost


def test_simulate_progress_output(tmp_path, capsys):
    assert main(sim_args(tmp_path)[:-1]) == EXIT_OK
    captured = capsys.readouterr()
    assert "simulating" in captured.err
    assert json.loads(captured.out)["runs"] == 2


def test_simulate_infeasible_start(bench_doc, tmp_path, capsys):
    bench_doc["x0"] = [2.7, 9.0]
    out = tmp_path / "out"
    assert main(sim_args(out)[:1] + [write(tmp_path, bench_doc)] + sim_args(out)[1:]) == EXIT_INFEASIBLE_START
    assert "infeasible start" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_simulate_config_error(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["simulate", str(tmp_path / "nope.json"), "--out", str(out)]) == EXIT_CONFIG
    assert "cannot read config" in capsys.readouterr().err
    assert not out.exists()


def test_thread_env(monkeypatch):
    from safe_smpc.sim import default_workers
    monkeypatch.setenv("SAFE_SMPC_THREADS", "3")
    assert default_workers() == 3
