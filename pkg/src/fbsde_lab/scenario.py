"""Scenario files: JSON schema, defaults and coefficient adapters.

A scenario is plain data: grid and Monte Carlo settings, the discount ``K``,
the Hurst index, the regime generator, coefficient expressions (see
:mod:`fbsde_lab.expr`), target-specific ``params`` and a list of ``checks``.
A coefficient is either one expression (which may use ``regime``) or a list
with one expression per regime.  Scenario states are scalar.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .drivers import validate_generator
from .expr import Expression, ExpressionError, parse_expression
from .timegrid import TimeGrid, make_grid

__all__ = [
    "ScenarioError",
    "Coefficient",
    "Scenario",
    "TARGETS",
    "SCHEMA",
    "parse_problem",
    "load_scenarios",
    "scenario_from_dict",
    "apply_overrides",
]


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending field."""


_EXPR = {"oneOf": [{"type": "string"}, {"type": "number"}]}
_COEF = {"oneOf": [_EXPR, {"type": "array", "items": _EXPR, "minItems": 1}]}

SCHEMA = {
    "type": "object",
    "required": ["name", "target"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "target": {"enum": ["forward", "backward", "coupled", "lqgame", "calculus", "drivers"]},
        "description": {"type": "string"},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t0": {"type": "number"},
                "t_end": {"type": "number"},
                "n_steps": {"type": "integer", "minimum": 1},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "hurst": {"type": "number", "exclusiveMinimum": 0.5, "exclusiveMaximum": 1.0},
        "K": {"type": "number"},
        "regimes": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "generator": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "i_start": {"type": "integer", "minimum": 1},
            },
        },
        "coefficients": {"type": "object", "additionalProperties": _COEF},
        "params": {"type": "object"},
        "checks": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "format": {"enum": ["csv", "json"]},
                "max_paths": {"type": "integer", "minimum": 0},
            },
        },
    },
}

_ALL = ("t", "x", "y", "z", "r", "f", "regime")
_FWD = ("t", "x", "regime")
_DET = ("t",)
_LQ = ("t", "regime")

# target -> (coefficient -> (allowed identifiers, default or None if required), checks, param defaults)
TARGETS: dict = {
    "drivers": {
        "coefficients": {},
        "checks": ("fbm-covariance",),
        "params": {"cov_nodes": [0.5, 1.0, 2.0], "n_se": 5.0},
    },
    "calculus": {
        "coefficients": {
            "b": (_FWD, 0.0), "sigma": (_FWD, 0.0), "gamma": (_DET, 0.0),
            "phi": (_FWD, None), "phi_t": (_FWD, 0.0), "phi_x": (_FWD, None), "phi_xx": (_FWD, None),
        },
        "checks": ("ito-residual", "convergence-order"),
        "params": {"x0": 0.0, "refinements": 3, "n_se": 5.0, "min_order": 0.5},
    },
    "forward": {
        "coefficients": {"b": (_FWD, None), "sigma": (_FWD, 0.0), "gamma": (_DET, 0.0)},
        "checks": ("picard", "decay", "apriori"),
        "params": {
            "x0": 0.0, "kappa_x": 0.0, "l_bx": 0.0, "l_sx": 0.0, "mu": 0.5,
            "picard_a": 16.0, "picard_T": None, "tol": 1e-3, "ratio_max": 0.30,
            "decay_u": 5.0, "decay_max": 1e-4, "decay_from": 1.0, "expect_decay": True,
        },
    },
    "backward": {
        "coefficients": {"g": (("t", "y", "z", "r", "f", "regime"), None)},
        "checks": ("truncation", "estimate"),
        "params": {
            "L": 0.0, "mu": 0.5, "n_schedule": [4.0, 6.0, 8.0], "tol": 1e-3,
            "y0_target": None, "y0_rtol": 0.02, "ratio_rtol": 0.5,
        },
    },
    "coupled": {
        "coefficients": {
            "psi": (("y", "regime"), 0.0), "b": (_ALL, None), "sigma": (_ALL, 0.0),
            "g": (_ALL, None), "gamma": (_DET, 0.0),
        },
        "checks": ("continuation", "delta-rule", "oracle"),
        "params": {"kappa_x": 0.0, "kappa_y": 0.0, "x0": 0.0, "tol": 1e-3, "oracle_tol": 1e-3},
    },
    "lqgame": {
        "coefficients": {
            **{k: (_LQ, 0.0) for k in ("A", "B1", "B2", "C", "D1", "D2", "Q", "S1", "S2", "R12", "gamma_fbm")},
            "R11": (_LQ, 1.0), "R22": (_LQ, -1.0),
        },
        "checks": ("zero-saddle", "saddle", "stationarity", "cross-term"),
        "params": {
            "x0": 1.0, "tol": 1e-3, "enforce_pattern": True, "n_perturbations": 20,
            "eps": [0.05, 0.1, 0.2], "saddle_seed": 0, "n_se": 3.0, "norm_max": 1e-2,
            "stationarity_max": 1e-6, "roundtrip_max": 1e-3,
        },
    },
}

_DEFAULTS = {
    "grid": {"t0": 0.0, "t_end": 1.0, "n_steps": 100},
    "mc": {"n_paths": 1000, "seed": 0},
    "hurst": 0.75,
    "K": 0.0,
    "regimes": {"m": 1, "i_start": 1},
    "coefficients": {},
    "params": {},
    "checks": [],
    "output": {"format": "csv", "max_paths": 20},
}


@dataclass(frozen=True)
class Coefficient:
    """One expression, or one expression per regime (regimes are ``1..m``)."""

    exprs: tuple

    @property
    def names(self) -> frozenset:
        return frozenset().union(*(e.names for e in self.exprs))

    @property
    def per_regime(self) -> bool:
        return len(self.exprs) > 1

    def __call__(self, regime, **env) -> np.ndarray:
        regime = np.asarray(regime)
        if not self.per_regime:
            return np.broadcast_to(self.exprs[0](regime=regime, **env), regime.shape).astype(float)
        out = np.zeros(regime.shape)
        for j, e in enumerate(self.exprs, start=1):
            mask = regime == j
            if np.any(mask):
                out = np.where(mask, e(regime=regime, **env), out)
        return out


@dataclass(frozen=True)
class Scenario:
    name: str
    target: str
    grid: TimeGrid
    n_paths: int
    seed: int
    hurst: float
    K: float
    q: np.ndarray
    i_start: int
    coefficients: dict
    params: dict
    checks: tuple
    output: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.q.shape[0]

    def settings(self) -> dict:
        """Resolved settings, as recorded in the run summary."""
        return {
            "grid": {"t0": self.grid.t0, "t_end": self.grid.t_end, "n_steps": self.grid.n_steps},
            "mc": {"n_paths": self.n_paths, "seed": self.seed},
            "hurst": self.hurst,
            "K": self.K,
            "regimes": {"m": self.m, "i_start": self.i_start, "generator": self.q.tolist()},
            "coefficients": {k: [e.source for e in c.exprs] if c.per_regime else c.exprs[0].source
                             for k, c in sorted(self.coefficients.items())},
            "params": self.params,
        }


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _field(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _coefficient(name: str, value, allowed, m: int) -> Coefficient:
    items = value if isinstance(value, list) else [value]
    if len(items) > 1 and len(items) != m:
        raise ScenarioError(f"coefficients.{name}: per-regime list has {len(items)} entries but there are {m} regimes")
    exprs = []
    for j, item in enumerate(items):
        where = f"coefficients.{name}" + (f".{j}" if len(items) > 1 else "")
        try:
            e: Expression = parse_expression(item)
        except ExpressionError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        bad = sorted(e.names - set(allowed))
        if bad:
            raise ScenarioError(f"{where}: {', '.join(bad)} not allowed here (allowed: {', '.join(allowed)})")
        exprs.append(e)
    return Coefficient(tuple(exprs))


def scenario_from_dict(data: dict) -> Scenario:
    """Validate one scenario object and fill in defaults."""
    if not isinstance(data, dict):
        raise ScenarioError("<root>: a scenario must be a JSON object")
    data = dict(data)
    if "H" in data:  # accepted alias for the Hurst index
        if "hurst" in data:
            raise ScenarioError("H: give the Hurst index once, as 'hurst' or 'H'")
        data["hurst"] = data.pop("H")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = _field(err.absolute_path)
        if path == "hurst":
            raise ScenarioError(f"hurst: Hurst index must lie in (1/2, 1), got {err.instance}")
        raise ScenarioError(f"{path}: {err.message}")
    full = _merge(_DEFAULTS, data)
    target = full["target"]
    info = TARGETS[target]

    g = full["grid"]
    if not g["t_end"] > g["t0"]:
        raise ScenarioError(f"grid.t_end: must exceed t0={g['t0']}, got {g['t_end']}")
    grid = make_grid(g["t0"], g["t_end"], g["n_steps"])

    reg = full["regimes"]
    gen = reg.get("generator", [[0.0] * reg["m"] for _ in range(reg["m"])])
    try:
        q = validate_generator(gen)
    except ValueError as exc:
        raise ScenarioError(f"regimes.generator: {exc}") from None
    if "m" in data.get("regimes", {}) and q.shape[0] != reg["m"]:
        raise ScenarioError(f"regimes.m: {reg['m']} does not match the {q.shape[0]}x{q.shape[0]} generator")
    m = q.shape[0]
    if reg["i_start"] > m:
        raise ScenarioError(f"regimes.i_start: {reg['i_start']} is not a regime of a {m}-state chain")

    coefs = {}
    unknown = sorted(set(full["coefficients"]) - set(info["coefficients"]))
    if unknown:
        raise ScenarioError(f"coefficients.{unknown[0]}: not a coefficient of target {target!r} "
                            f"(expected one of {', '.join(info['coefficients'])})")
    for name, (allowed, default) in info["coefficients"].items():
        if name in full["coefficients"]:
            coefs[name] = _coefficient(name, full["coefficients"][name], allowed, m)
        elif default is None:
            raise ScenarioError(f"coefficients.{name}: required for target {target!r}")
        else:
            coefs[name] = _coefficient(name, default, allowed, m)

    unknown = sorted(set(full["params"]) - set(info["params"]))
    if unknown:
        raise ScenarioError(f"params.{unknown[0]}: not a parameter of target {target!r} "
                            f"(expected one of {', '.join(info['params'])})")
    params = _merge(info["params"], full["params"])

    for j, check in enumerate(full["checks"]):
        if check not in info["checks"]:
            raise ScenarioError(f"checks.{j}: {check!r} is not a check of target {target!r} "
                                f"(expected one of {', '.join(info['checks'])})")

    return Scenario(
        name=full["name"],
        target=target,
        grid=grid,
        n_paths=int(full["mc"]["n_paths"]),
        seed=int(full["mc"]["seed"]),
        hurst=float(full["hurst"]),
        K=float(full["K"]),
        q=q,
        i_start=int(reg["i_start"]),
        coefficients=coefs,
        params=params,
        checks=tuple(full["checks"]),
        output=full["output"],
        raw=data,
    )


def load_scenarios(data) -> list[Scenario]:
    """Accept one scenario object, a list of them, or ``{"scenarios": [...]}``."""
    if isinstance(data, dict) and "scenarios" in data:
        items = data["scenarios"]
        prefix = "scenarios."
    elif isinstance(data, list):
        items, prefix = data, ""
    else:
        return [scenario_from_dict(data)]
    if not isinstance(items, list) or not items:
        raise ScenarioError("scenarios: expected a non-empty list")
    out, seen = [], set()
    for j, item in enumerate(items):
        try:
            s = scenario_from_dict(item)
        except ScenarioError as exc:
            raise ScenarioError(f"{prefix}{j}.{exc}") from None
        if s.name in seen:
            raise ScenarioError(f"{prefix}{j}.name: duplicate scenario name {s.name!r}")
        seen.add(s.name)
        out.append(s)
    return out


def parse_problem(path) -> list[Scenario]:
    """Read and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return load_scenarios(data)


def apply_overrides(s: Scenario, paths=None, steps=None, horizon=None, seed=None) -> Scenario:
    """Rebuild ``s`` with command-line overrides of the grid and Monte Carlo settings."""
    raw = copy.deepcopy(s.raw)
    if paths is not None:
        raw.setdefault("mc", {})["n_paths"] = int(paths)
    if seed is not None:
        raw.setdefault("mc", {})["seed"] = int(seed)
    if steps is not None:
        raw.setdefault("grid", {})["n_steps"] = int(steps)
    if horizon is not None:
        raw.setdefault("grid", {})["t_end"] = float(horizon)
    return scenario_from_dict(raw)
