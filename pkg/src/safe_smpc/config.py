"""JSON experiment configuration."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from safe_smpc.errors import ConfigError
from safe_smpc.polytope import Polytope
from safe_smpc.qp import SolverTolerances
from safe_smpc.sim import CONTROLLERS, DISTURBANCES, ExperimentConfig
from safe_smpc.system import LinearSystem

_MATRIX = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_VECTOR = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_POLYTOPE = {"type": "object", "additionalProperties": False, "required": ["A", "b"],
             "properties": {"A": _MATRIX, "b": _VECTOR}}


def _obj(required, **props):
    return {"type": "object", "additionalProperties": False, "required": list(required),
            "properties": props}


SCHEMA = _obj(
    ["system", "disturbance", "constraints", "controller", "x0"],
    system=_obj(["A", "B"], A=_MATRIX, B=_MATRIX, G=_MATRIX),
    disturbance=_obj(["Sigma_w", "W"], Sigma_w=_MATRIX, W=_POLYTOPE,
                     sampler={"enum": list(DISTURBANCES)}),
    constraints=_obj(["X", "U"], X=_POLYTOPE, U=_POLYTOPE),
    controller=_obj(
        ["N", "N_b", "beta", "K", "Q", "R"],
        N={"type": "integer", "minimum": 1},
        N_b={"type": "integer", "minimum": 1},
        beta={"type": "number"},
        K=_MATRIX, Q=_MATRIX, R=_MATRIX, P=_MATRIX,
        terminal={"enum": ["control_invariant", "positive_invariant"]},
        kind={"enum": list(CONTROLLERS)},
    ),
    x0=_VECTOR,
    n_runs={"type": "integer", "minimum": 1},
    n_steps={"type": "integer", "minimum": 1},
    seed={"type": "integer", "minimum": 0},
    dt={"type": "number", "exclusiveMinimum": 0},
    mrpi_eps={"type": "number", "exclusiveMinimum": 0},
    tolerances=_obj([], feas_tol={"type": "number", "exclusiveMinimum": 0},
                    kkt_tol={"type": "number", "exclusiveMinimum": 0},
                    psd_floor={"type": "number", "maximum": 0},
                    regularization={"type": "number", "minimum": 0},
                    max_iter_factor={"type": "integer", "minimum": 1}),
)


def paper_config_path() -> Path:
    return Path(str(resources.files("safe_smpc") / "data" / "paper.json"))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc


def _poly(d) -> Polytope:
    return Polytope(np.array(d["A"], dtype=float), np.array(d["b"], dtype=float))


def config_from_dict(doc: dict, **overrides) -> ExperimentConfig:
    """Validated ExperimentConfig; keyword overrides replace top-level fields."""
    validate(doc)
    s, d, c, k = doc["system"], doc["disturbance"], doc["constraints"], doc["controller"]
    try:
        cfg = ExperimentConfig(
            system=LinearSystem(s["A"], s["B"], s.get("G")),
            Sigma_w=np.array(d["Sigma_w"], dtype=float),
            W=_poly(d["W"]),
            X=_poly(c["X"]),
            U=_poly(c["U"]),
            N=k["N"], N_b=k["N_b"], beta=float(k["beta"]),
            K=k["K"], Q=k["Q"], R=k["R"], P=k.get("P"),
            x0=doc["x0"],
            n_runs=doc.get("n_runs", 1),
            n_steps=doc.get("n_steps", 80),
            seed=doc.get("seed", 0),
            controller=k.get("kind", "safe"),
            mrpi_eps=doc.get("mrpi_eps", 1e-3),
            terminal=k.get("terminal", "control_invariant"),
            disturbance=d.get("sampler", "gaussian"),
            tolerances=SolverTolerances(**doc.get("tolerances", {})),
        )
        return cfg.with_(**overrides) if overrides else cfg
    except ValueError as exc:
        raise ConfigError(f"inconsistent config: {exc}") from exc


def load_config(path, **overrides) -> ExperimentConfig:
    return config_from_dict(read_json(path), **overrides)


def load_paper_config(**overrides) -> ExperimentConfig:
    return load_config(paper_config_path(), **overrides)
