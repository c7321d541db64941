"""Builtin scenarios.  Each entry is plain scenario data (the same schema as a
user file) plus a one-line description; a builtin may hold several scenarios."""

from __future__ import annotations

import copy

__all__ = ["BUILTINS", "builtin_names", "builtin_data", "describe"]

_TWO_STATE = {"m": 2, "generator": [[-1.0, 1.0], [1.0, -1.0]], "i_start": 1}

_SQUARE = {"phi": "x^2", "phi_x": "2*x", "phi_xx": 2}

BUILTINS: dict = {
    "nonlinear-continuation": (
        "Two-regime nonlinear coupled system solved by continuation from tau=0 to tau=1",
        [{
            "name": "nonlinear-continuation",
            "target": "coupled",
            "grid": {"t0": 0.0, "t_end": 2.0, "n_steps": 100},
            "mc": {"n_paths": 1000, "seed": 5},
            "hurst": 0.75,
            "K": -0.5,
            "regimes": _TWO_STATE,
            "coefficients": {
                "psi": ["-2*y + sin(y)", "3*y - sin(y)"],
                "b": ["-2*y + sin(y)", "3*y - sin(y)"],
                "sigma": ["-2*z + sin(z)", "z + sin(z)"],
                "g": ["-2*x + sin(x) + y", "0.5*x - sin(x) + y"],
                "gamma": 1,
            },
            "params": {"kappa_x": 0.0, "kappa_y": -1.0, "x0": 0.0, "tol": 1e-3},
            "checks": ["continuation", "delta-rule"],
        }],
    ),
    "zero-sum-game": (
        "Zero-sum LQ game with saddle point (0, 0): value, saddle inequalities, stationarity",
        [{
            "name": "zero-sum-game",
            "target": "lqgame",
            "grid": {"t0": 0.0, "t_end": 3.0, "n_steps": 60},
            "mc": {"n_paths": 10000, "seed": 2},
            "hurst": 0.75,
            "K": -0.5,
            "regimes": _TWO_STATE,
            "coefficients": {"B1": 1, "B2": 1, "D1": 1, "D2": 1, "R11": 1, "R22": -1, "gamma_fbm": 1},
            "params": {"x0": 1.0, "tol": 1e-3, "n_perturbations": 20, "eps": [0.05, 0.1, 0.2]},
            "checks": ["zero-saddle", "saddle", "stationarity"],
        }],
    ),
    "fbm-covariance": (
        "Empirical fBm covariance at t in {0.5, 1, 2} against the closed form, H in {0.6, 0.75, 0.9}",
        [
            {
                "name": f"fbm-covariance-h{tag}",
                "target": "drivers",
                "grid": {"t0": 0.0, "t_end": 2.0, "n_steps": 200},
                "mc": {"n_paths": 10000, "seed": 11},
                "hurst": H,
                "params": {"cov_nodes": [0.5, 1.0, 2.0], "n_se": 5.0},
                "checks": ["fbm-covariance"],
            }
            for tag, H in (("060", 0.6), ("075", 0.75), ("090", 0.9))
        ],
    ),
    "ito-residual": (
        "Ito formula residual and its refinement order for Brownian, fractional and chain test cases",
        [
            {
                "name": "ito-residual-bm",
                "target": "calculus",
                "grid": {"t0": 0.0, "t_end": 1.0, "n_steps": 50},
                "mc": {"n_paths": 10000, "seed": 7},
                "coefficients": {"sigma": 1, **_SQUARE},
                "params": {"refinements": 3, "min_order": 0.8},
                "checks": ["ito-residual", "convergence-order"],
            },
            {
                "name": "ito-residual-fbm",
                "target": "calculus",
                "grid": {"t0": 0.0, "t_end": 1.0, "n_steps": 50},
                "mc": {"n_paths": 10000, "seed": 7},
                "hurst": 0.75,
                "coefficients": {"gamma": 1, **_SQUARE},
                "params": {"refinements": 3, "min_order": 0.5},
                "checks": ["ito-residual", "convergence-order"],
            },
            {
                "name": "ito-residual-chain",
                "target": "calculus",
                "grid": {"t0": 0.0, "t_end": 1.0, "n_steps": 50},
                "mc": {"n_paths": 10000, "seed": 7},
                "regimes": _TWO_STATE,
                "coefficients": {"phi": "regime^2", "phi_x": 0, "phi_xx": 0},
                "params": {"refinements": 3, "min_order": None},
                "checks": ["ito-residual", "convergence-order"],
            },
        ],
    ),
    "picard-contraction": (
        "Picard iteration contraction on a linear system, plus decay and a-priori estimates",
        [
            {
                "name": "picard-contraction",
                "target": "forward",
                "grid": {"t0": 0.0, "t_end": 1.0, "n_steps": 100},
                "mc": {"n_paths": 2000, "seed": 3},
                "coefficients": {"b": "-x", "sigma": 1, "gamma": 0.5},
                "params": {"x0": 1.0, "kappa_x": 1.0, "l_bx": 1.0, "picard_a": 16.0, "tol": 1e-3},
                "checks": ["picard"],
            },
            {
                "name": "decay-admissible",
                "target": "forward",
                "grid": {"t0": 0.0, "t_end": 6.0, "n_steps": 600},
                "mc": {"n_paths": 4000, "seed": 3},
                "K": -1.0,
                "coefficients": {"b": "-2*x", "sigma": 1},
                "params": {"x0": 0.0, "kappa_x": 2.0, "l_bx": 2.0, "mu": 0.5, "decay_u": 5.0, "decay_from": 1.0},
                "checks": ["decay", "apriori"],
            },
            {
                "name": "decay-inadmissible",
                "target": "forward",
                "grid": {"t0": 0.0, "t_end": 6.0, "n_steps": 600},
                "mc": {"n_paths": 4000, "seed": 3},
                "K": 3.0,
                "coefficients": {"b": "-2*x", "sigma": 1},
                "params": {"x0": 0.0, "kappa_x": 2.0, "l_bx": 2.0, "expect_decay": False},
                "checks": ["decay"],
            },
        ],
    ),
    "bsde-truncation": (
        "Backward equation with driver exp(-t): truncation levels 4, 6, 8 and the energy estimate",
        [
            {
                "name": "bsde-truncation",
                "target": "backward",
                "grid": {"t0": 0.0, "t_end": 8.0, "n_steps": 800},
                "mc": {"n_paths": 200, "seed": 1},
                "K": 0.1,
                "coefficients": {"g": "exp(-t)"},
                "params": {"n_schedule": [4.0, 6.0, 8.0], "tol": 1e-3, "y0_target": -1.0, "y0_rtol": 0.02,
                           "ratio_rtol": 0.5},
                "checks": ["truncation"],
            },
            {
                "name": "bsde-estimate",
                "target": "backward",
                "grid": {"t0": 0.0, "t_end": 8.0, "n_steps": 800},
                "mc": {"n_paths": 200, "seed": 1},
                "K": 1.0,
                "coefficients": {"g": "exp(-t)"},
                "params": {"L": 0.25, "mu": 0.5},
                "checks": ["estimate"],
            },
        ],
    ),
    "continuation-linear": (
        "Decoupled linear system: continuation against forward-then-backward sequential solve",
        [{
            "name": "continuation-linear",
            "target": "coupled",
            "grid": {"t0": 0.0, "t_end": 4.0, "n_steps": 100},
            "mc": {"n_paths": 500, "seed": 5},
            "K": 0.0,
            "regimes": _TWO_STATE,
            "coefficients": {"b": "-x", "sigma": 1, "g": "y + exp(-t)", "gamma": 0.5},
            "params": {"kappa_x": 1.0, "kappa_y": -1.0, "x0": 1.0, "tol": 1e-3, "oracle_tol": 1e-3},
            "checks": ["continuation", "delta-rule", "oracle"],
        }],
    ),
    "cross-term-roundtrip": (
        "LQ game with a state-control cross term: direct solve against the reduced problem",
        [{
            "name": "cross-term-roundtrip",
            "target": "lqgame",
            "grid": {"t0": 0.0, "t_end": 3.0, "n_steps": 60},
            "mc": {"n_paths": 1000, "seed": 2},
            "K": -0.5,
            "regimes": _TWO_STATE,
            "coefficients": {"A": -2, "B1": 1, "B2": 0.5, "C": 0.2, "gamma_fbm": 0.5, "Q": 1, "S1": 0.5,
                             "S2": 0.2, "R11": 2, "R22": -4},
            "params": {"x0": 1.0, "tol": 1e-3, "enforce_pattern": False},
            "checks": ["stationarity", "cross-term"],
        }],
    ),
}


def builtin_names() -> list[str]:
    return list(BUILTINS)


def describe(name: str) -> str:
    return BUILTINS[name][0]


def builtin_data(name: str) -> list[dict]:
    """A fresh copy of the scenario data of builtin ``name``."""
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin {name!r}; available: {', '.join(BUILTINS)}")
    return copy.deepcopy(BUILTINS[name][1])
