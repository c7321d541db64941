"""Per-target pipelines: turn a :class:`~fbsde_lab.scenario.Scenario` into a run report.

Each pipeline simulates the drivers, calls the relevant solver, evaluates the
requested checks and collects artifacts (path tables and JSON documents).
A failing check is recorded, not raised; solver errors propagate with the
scenario name attached.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardSpec, bsde_estimate_check, solve_infinite, solve_truncated
from .calculus import GeneratorInputs, TestFunction, convergence_order, ito_residual
from .coupled import ContinuationError, FBSDESpec, Forcing, solve_fbsde, zero_forcing
from .drivers import DriverBundle, fbm_covariance, simulate_bundle
from .forward import (
    ContractionError,
    ForwardSpec,
    apriori_check,
    decay_diagnostic,
    equivalent_norm,
    euler_solve,
    picard_solve,
)
from .lqgame import (
    cross_term_reduce,
    evaluate_cost,
    make_problem,
    saddle_check,
    solve_game,
    stationarity_residual,
    _stationarity_paths,
)
from .scenario import Coefficient, Scenario
from .timegrid import make_grid, weighted_l2k_norm

__all__ = ["Table", "RunReport", "ScenarioRunError", "run_scenario", "plain"]


class ScenarioRunError(RuntimeError):
    """A module error raised while running a scenario, tagged with the scenario name."""


@dataclass(frozen=True)
class Table:
    """Column-oriented table; the first column is time (or the refinement variable)."""

    columns: list
    rows: np.ndarray


@dataclass
class RunReport:
    name: str
    target: str
    settings: dict
    scalars: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # artifact name -> Table | dict
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.get("passed", False) for c in self.checks.values())

    def summary(self) -> dict:
        """Deterministic summary (no timing): identical inputs give identical output."""
        return plain({
            "name": self.name,
            "target": self.target,
            "settings": self.settings,
            "scalars": self.scalars,
            "checks": self.checks,
            "passed": self.passed,
        })


def plain(obj):
    """Recursively convert to JSON-ready Python values; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def _bundle(s: Scenario, grid=None) -> DriverBundle:
    return simulate_bundle(grid or s.grid, s.n_paths, s.seed, d=1, H=s.hurst, q=s.q, i_start=s.i_start)


def _path_table(nodes, series: dict, max_paths: int) -> Table:
    """``time``, then for each series its mean and its first ``max_paths`` paths."""
    cols, data = ["time"], [np.asarray(nodes, dtype=float)]
    for name, arr in series.items():
        arr = np.asarray(arr, dtype=float)
        cols.append(f"{name}_mean")
        data.append(arr.mean(axis=0))
        for p in range(min(max_paths, arr.shape[0])):
            cols.append(f"{name}_{p}")
            data.append(arr[p])
    return Table(cols, np.column_stack(data))


def _zscore(mean: float, se: float) -> float:
    if se > 0:
        return abs(mean) / se
    return 0.0 if abs(mean) < 1e-12 else float("inf")


# ----------------------------------------------------------------------------- drivers


def _run_drivers(s: Scenario, rep: RunReport) -> None:
    bundle = _bundle(s)
    grid = bundle.grid
    rep.artifacts["paths"] = _path_table(
        grid.nodes,
        {"w": bundle.w_path[:, :, 0], "bh": bundle.bh_path, "regime": bundle.regime_path},
        s.output["max_paths"],
    )
    if "fbm-covariance" in s.checks:
        nodes = [t for t in s.params["cov_nodes"] if grid.t0 < t <= grid.t_end + 1e-12]
        idx = [grid.index_of(t) for t in nodes]
        exact = fbm_covariance(np.asarray(nodes), s.hurst, origin=grid.t0)
        rows, worst = [], 0.0
        for a, ka in enumerate(idx):
            for b, kb in enumerate(idx):
                prod = bundle.bh_path[:, ka] * bundle.bh_path[:, kb]
                emp = float(prod.mean())
                se = float(prod.std(ddof=1) / np.sqrt(prod.size))
                z = _zscore(emp - exact[a, b], se)
                worst = max(worst, z)
                rows.append([nodes[a], nodes[b], emp, exact[a, b], se, z])
        rep.artifacts["covariance"] = Table(["t", "u", "empirical", "exact", "se", "z"], np.asarray(rows))
        rep.checks["fbm-covariance"] = {"passed": worst <= s.params["n_se"], "max_z": worst,
                                        "nodes": nodes, "n_se": s.params["n_se"]}
    rep.scalars["bh_var_end"] = float(np.var(bundle.bh_path[:, -1]))


# ----------------------------------------------------------------------------- calculus


def _forward_spec(s: Scenario, x0: float, **extra) -> ForwardSpec:
    b, sig, gam = (s.coefficients[k] for k in ("b", "sigma", "gamma"))
    return ForwardSpec(
        b=lambda t, x, i: b(i, t=t, x=x[:, 0])[:, None],
        sigma=lambda t, x, i: sig(i, t=t, x=x[:, 0])[:, None, None],
        gamma=lambda t: np.atleast_1d(gam(0, t=t)),
        x0=float(x0),
        n=1,
        i_start=s.i_start,
        K=s.K,
        name=s.name,
        **extra,
    )


def _test_function(s: Scenario) -> TestFunction:
    c = s.coefficients
    return TestFunction(
        value=lambda t, x, i: c["phi"](i, t=t, x=x[:, 0]),
        dt=lambda t, x, i: c["phi_t"](i, t=t, x=x[:, 0]),
        grad=lambda t, x, i: c["phi_x"](i, t=t, x=x[:, 0])[:, None],
        hess=lambda t, x, i: c["phi_xx"](i, t=t, x=x[:, 0])[:, None, None],
    )


def _run_calculus(s: Scenario, rep: RunReport) -> None:
    spec = _forward_spec(s, s.params["x0"])
    tf = _test_function(s)
    gi = GeneratorInputs(b=spec.b, sigma=spec.sigma, gamma=spec.gamma, q=s.q, H=s.hurst, t0=s.grid.t0)
    n_levels = 1 + (int(s.params["refinements"]) if "convergence-order" in s.checks else 0)
    rows = []
    for lev in range(n_levels):
        grid = make_grid(s.grid.t0, s.grid.t_end, s.grid.n_steps * 2**lev)
        bundle = _bundle(s, grid)
        x = euler_solve(spec, bundle).x
        st = ito_residual(tf, gi, bundle, x)
        rows.append([grid.n_steps, grid.dt, st.mean, st.se, st.rms, st.mse])
    table = np.asarray(rows, dtype=float)
    rep.artifacts["residuals"] = Table(["n_steps", "dt", "mean", "se", "rms", "mse"], table)
    rep.scalars.update(residual_mean=table[-1, 2], residual_se=table[-1, 3], residual_rms=table[-1, 4])
    if "ito-residual" in s.checks:
        z = [_zscore(m, se) for m, se in table[:, 2:4]]
        rep.checks["ito-residual"] = {"passed": max(z) <= s.params["n_se"], "max_z": max(z),
                                      "n_se": s.params["n_se"]}
    if "convergence-order" in s.checks:
        mse = table[:, 5]
        if np.all(mse < 1e-24):
            rep.checks["convergence-order"] = {"passed": True, "exact": True, "mse_order": None, "rms_order": None}
        else:
            order = convergence_order(table[:, 1], mse)
            rms_order = convergence_order(table[:, 1], table[:, 4])
            min_order = s.params["min_order"]
            rep.checks["convergence-order"] = {
                "passed": min_order is None or order >= min_order, "exact": False,
                "mse_order": order, "rms_order": rms_order, "min_order": min_order,
            }


# ----------------------------------------------------------------------------- forward


def _run_forward(s: Scenario, rep: RunReport) -> None:
    p = s.params
    spec = _forward_spec(s, p["x0"], kappa_x=p["kappa_x"], l_bx=p["l_bx"], l_sx=p["l_sx"])
    bundle = _bundle(s)
    sol = euler_solve(spec, bundle)
    x = sol.x[:, :, 0]
    rep.artifacts["paths"] = _path_table(bundle.grid.nodes, {"x": x}, s.output["max_paths"])
    rep.scalars.update(x_mean_end=float(x[:, -1].mean()), x_second_moment_end=float(np.mean(x[:, -1] ** 2)))

    if "picard" in s.checks:
        T = p["picard_T"] if p["picard_T"] is not None else s.grid.t_end
        try:
            psol, prep = picard_solve(spec, bundle, T=T, a=p["picard_a"], tol=p["tol"])
        except ContractionError as exc:
            rep.checks["picard"] = {"passed": False, "error": str(exc)}
        else:
            n = psol.grid.n_nodes
            gap = equivalent_norm(psol.x - sol.x[:, :n], psol.grid, p["picard_a"])
            worst = max(prep.ratios) if prep.ratios else 0.0
            rep.checks["picard"] = {
                "passed": bool(prep.converged and worst <= p["ratio_max"] and gap <= p["tol"]),
                "factor": prep.factor, "ratios": prep.ratios, "max_ratio": worst, "ratio_max": p["ratio_max"],
                "distances": prep.distances, "iterations": prep.iterations, "converged": prep.converged,
                "distance_to_euler": gap,
            }

    if "decay" in s.checks:
        dr = decay_diagnostic(sol, s.K)
        grid = bundle.grid
        rep.artifacts["decay"] = Table(["time", "weighted_second_moment"], np.column_stack([grid.nodes, dr.curve]))
        out = {"decaying": dr.decaying, "expect_decay": p["expect_decay"]}
        if p["expect_decay"]:
            k_u = grid.index_of(p["decay_u"]) if p["decay_u"] <= grid.t_end else grid.n_steps
            k_from = grid.index_of(p["decay_from"]) if p["decay_from"] <= grid.t_end else grid.n_steps
            monotone = bool(np.all(np.diff(dr.curve[k_from:]) < 0))
            value = float(dr.curve[k_u])
            out.update(value_at_u=value, u=float(grid.nodes[k_u]), decay_max=p["decay_max"], monotone=monotone,
                       passed=bool(dr.decaying and monotone and value < p["decay_max"]))
        else:
            out.update(value_end=float(dr.curve[-1]), passed=not dr.decaying)
        rep.checks["decay"] = out

    if "apriori" in s.checks:
        single = apriori_check(spec, sol, s.K, p["mu"])
        stab = apriori_check(spec, sol, s.K, p["mu"], spec, sol)
        rep.checks["apriori"] = {
            "passed": bool(single.passed and single.margin > 0 and stab.lhs == 0.0),
            "lhs": single.lhs, "rhs": single.rhs, "margin": single.margin, "stability_lhs": stab.lhs,
        }


# ----------------------------------------------------------------------------- backward


def _backward_spec(s: Scenario, bundle: DriverBundle, **extra) -> BackwardSpec:
    g = s.coefficients["g"]

    def driver(t, y, z, r, f, i):
        f0 = f[:, 0] if f.shape[1] else np.zeros_like(y)
        return g(i, t=t, y=y, z=z[:, 0], r=r, f=f0)

    return BackwardSpec(g=driver, K=s.K, d=1, n_pairs=len(bundle.pairs), name=s.name, **extra)


def _run_backward(s: Scenario, rep: RunReport) -> None:
    p = s.params
    bundle = _bundle(s)
    spec = _backward_spec(s, bundle, L=p["L"])
    sol = None
    if "truncation" in s.checks:
        sol, cr = solve_infinite(spec, bundle, tol=p["tol"], n_schedule=p["n_schedule"])
        d = cr.distances
        ratios = [b / a for a, b in zip(d, d[1:])]
        targets = [float(np.exp(-(cr.levels[k + 2] - cr.levels[k + 1]))) for k in range(len(ratios))]
        ratio_ok = bool(ratios) and all(abs(r / tg - 1.0) <= p["ratio_rtol"] for r, tg in zip(ratios, targets))
        y0 = float(sol.y[:, 0].mean())
        y0_ok = p["y0_target"] is None or abs(y0 / p["y0_target"] - 1.0) <= p["y0_rtol"]
        rep.checks["truncation"] = {
            "passed": bool(ratio_ok and y0_ok and all(b < a for a, b in zip(d, d[1:]))),
            "levels": cr.levels, "distances": d, "ratios": ratios, "target_ratios": targets,
            "converged": cr.converged, "y0": y0, "y0_target": p["y0_target"],
        }
    if sol is None:
        sol = solve_truncated(spec, bundle, s.grid.t_end)
    rep.artifacts["paths"] = _path_table(bundle.grid.nodes, {"y": sol.y, "z": sol.z[:, :, 0], "r": sol.r},
                                         s.output["max_paths"])
    rep.scalars.update(y0=float(sol.y[:, 0].mean()), truncation_level=sol.n)
    if "estimate" in s.checks:
        single = bsde_estimate_check(spec, sol, p["mu"])
        stab = bsde_estimate_check(spec, sol, p["mu"], spec, sol)
        rep.checks["estimate"] = {
            "passed": bool(single.passed and single.margin > 0 and stab.lhs == 0.0),
            "lhs": single.lhs, "rhs": single.rhs, "margin": single.margin, "stability_lhs": stab.lhs,
        }


# ----------------------------------------------------------------------------- coupled


def _coupled_spec(s: Scenario) -> FBSDESpec:
    c = s.coefficients

    def lift(coef: Coefficient):
        def fn(t, x, y, z, r, f, i):
            f0 = f[:, 0] if np.ndim(f) == 2 and f.shape[1] else np.zeros_like(y)
            return coef(i, t=t, x=x, y=y, z=z[:, 0], r=r, f=f0)
        return fn

    return FBSDESpec(
        psi=lambda y, i: c["psi"](i, y=y),
        b=lift(c["b"]),
        sigma=lift(c["sigma"]),
        g=lift(c["g"]),
        gamma=lambda t: float(c["gamma"](0, t=t)),
        kappa_x=float(s.params["kappa_x"]),
        kappa_y=float(s.params["kappa_y"]),
        K=s.K,
        name=s.name,
    )


def _delta_rule(trace) -> dict:
    """Each step must satisfy ``delta <= min(remaining, delta0)`` with ``delta0 = 1/(2 sqrt(C5))``."""
    steps = trace.steps[1:]
    rows, ok = [], True
    tau = 0.0
    for st, d0 in zip(steps, trace.delta0):
        bound = min(1.0 - tau, d0)
        good = st.delta <= bound * (1 + 1e-12)
        ok &= good
        rows.append({"tau_start": tau, "delta": st.delta, "delta0": d0, "bound": bound, "ok": bool(good)})
        tau = st.tau
    return {"passed": bool(ok and len(steps) == len(trace.delta0)), "steps": rows}


def _run_coupled(s: Scenario, rep: RunReport) -> None:
    p = s.params
    spec = _coupled_spec(s)
    bundle = _bundle(s)
    base = zero_forcing(bundle)
    forcing = Forcing(np.full(bundle.n_paths, float(p["x0"])), base.phi, base.psi, base.eta, base.zeta)
    try:
        theta, trace = solve_fbsde(spec, bundle, tol=p["tol"], forcing=forcing)
    except ContinuationError as exc:
        rep.artifacts["trace"] = exc.trace.to_dict()
        rep.checks["continuation"] = {"passed": False, "error": str(exc)}
        for name in ("delta-rule", "oracle"):
            if name in s.checks:
                rep.checks[name] = {"passed": False, "error": "continuation did not finish"}
        return
    rep.artifacts["trace"] = trace.to_dict()
    rep.artifacts["paths"] = _path_table(bundle.grid.nodes, {"x": theta.x, "y": theta.y}, s.output["max_paths"])
    reached = trace.steps[-1].tau
    rep.scalars.update(y0=float(theta.y[:, 0].mean()), tau_reached=reached,
                       final_residual=trace.final_residual, n_steps=len(trace.steps) - 1)
    if "continuation" in s.checks:
        rep.checks["continuation"] = {
            "passed": bool(reached == 1.0 and trace.final_residual < p["tol"]),
            "tau_reached": reached, "final_residual": trace.final_residual, "tol": p["tol"],
            "deltas": [st.delta for st in trace.steps[1:]],
        }
    if "delta-rule" in s.checks:
        rep.checks["delta-rule"] = _delta_rule(trace)
    if "oracle" in s.checks:
        rep.checks["oracle"] = _sequential_oracle(s, bundle, theta, p)


def _sequential_oracle(s: Scenario, bundle: DriverBundle, theta, p) -> dict:
    """Forward Euler, then the backward solver, for systems without feedback between the two."""
    c = s.coefficients
    fwd_ok = (c["b"].names | c["sigma"].names) <= {"t", "x", "regime"} and not c["psi"].names - {"regime"}
    if not fwd_ok or "x" in c["g"].names:
        return {"passed": False, "error": "the system is coupled; the sequential oracle does not apply"}
    psi0 = c["psi"](np.full(bundle.n_paths, s.i_start), y=np.zeros(bundle.n_paths))
    x0 = float(p["x0"]) + float(psi0[0])
    fwd = euler_solve(_forward_spec(s, x0), bundle).x[:, :, 0]
    bwd = solve_truncated(_backward_spec(s, bundle), bundle, s.grid.t_end).y
    dx = weighted_l2k_norm(theta.x - fwd, s.K, bundle.grid)
    dy = weighted_l2k_norm(theta.y - bwd, s.K, bundle.grid)
    return {"passed": bool(dx <= p["oracle_tol"] and dy <= p["oracle_tol"]), "x_distance": dx, "y_distance": dy,
            "tol": p["oracle_tol"]}


# ----------------------------------------------------------------------------- lqgame


def _lq_coef(coef: Coefficient, m: int):
    if not coef.names - {"regime"}:
        vals = [float(coef(j)) for j in range(1, m + 1)]
        return vals[0] if len(set(vals)) == 1 else vals
    return lambda t, i: np.array([[float(coef(i, t=t))]])


def _lq_problem(s: Scenario):
    c = s.coefficients
    kw = {k: _lq_coef(v, s.m) for k, v in c.items() if k != "gamma_fbm"}
    g = c["gamma_fbm"]
    gamma = float(g(0, t=0.0)) if not g.names else (lambda t: float(g(0, t=t)))
    return make_problem(**kw, gamma_fbm=gamma, K=s.K, x0=s.params["x0"], t0=s.grid.t0, i_start=s.i_start,
                        q=s.q, H=s.hurst, name=s.name)


def _run_lqgame(s: Scenario, rep: RunReport) -> None:
    p = s.params
    prob = _lq_problem(s)
    bundle = _bundle(s)
    sol = solve_game(prob, bundle, tol=p["tol"], enforce_pattern=p["enforce_pattern"])
    grid = bundle.grid
    rep.scalars.update(J=sol.J, J_se=sol.J_se, u1_norm=sol.u_norms[0], u2_norm=sol.u_norms[1],
                       stationarity=sol.stationarity, tail_bound=sol.tail_bound,
                       final_residual=sol.trace.final_residual)
    rep.artifacts["solution"] = {"scalars": dict(rep.scalars), "trace": sol.trace.to_dict()}
    stat = _stationarity_paths(prob, sol.u1, sol.u2, sol.x, sol.y, sol.z if sol.z.ndim == 3 else sol.z[:, :, None],
                               bundle)
    rms = np.sqrt(np.mean(stat**2, axis=0))
    rep.artifacts["residual"] = Table(["time", "player1_rms", "player2_rms"], np.column_stack([grid.nodes, rms]))
    rep.artifacts["paths"] = _path_table(grid.nodes, {"x": sol.x, "u1": sol.u1, "u2": sol.u2},
                                         s.output["max_paths"])

    if "zero-saddle" in s.checks:
        ok = abs(sol.J) <= p["n_se"] * sol.J_se and max(sol.u_norms) < p["norm_max"]
        rep.checks["zero-saddle"] = {"passed": bool(ok), "J": sol.J, "J_se": sol.J_se, "u_norms": sol.u_norms,
                                     "n_se": p["n_se"], "norm_max": p["norm_max"]}
    if "saddle" in s.checks:
        sr = saddle_check(prob, sol, bundle, n_perturbations=p["n_perturbations"], eps=tuple(p["eps"]),
                          seed=p["saddle_seed"], band=p["n_se"])
        rep.artifacts["saddle"] = {"violations": sr.violations, "first_order_violations": sr.first_order_violations,
                                   "second_order_sign_violations": sr.second_order_sign_violations,
                                   "expansion_error": sr.expansion_error, "records": sr.records}
        rep.checks["saddle"] = {"passed": sr.violations == 0, "violations": sr.violations,
                                "first_order_violations": sr.first_order_violations,
                                "second_order_sign_violations": sr.second_order_sign_violations,
                                "n_records": len(sr.records)}
    if "stationarity" in s.checks:
        rep.checks["stationarity"] = {"passed": bool(sol.stationarity < p["stationarity_max"]),
                                      "residual": sol.stationarity, "max": p["stationarity_max"]}
    if "cross-term" in s.checks:
        reduced, cmap = cross_term_reduce(prob)
        tsol = solve_game(reduced, bundle, tol=p["tol"], enforce_pattern=p["enforce_pattern"])
        u1, u2 = cmap.from_tilde(tsol.u1, tsol.u2, tsol.x, bundle)
        gap = weighted_l2k_norm(np.stack([u1 - sol.u1, u2 - sol.u2], axis=2), prob.K, grid)
        back = stationarity_residual(prob, u1, u2, tsol.x, tsol.y, tsol.z, bundle)
        direct = evaluate_cost(prob, sol.u1, sol.u2, bundle)
        v1, v2 = cmap.to_tilde(sol.u1, sol.u2, direct.x, bundle)
        matched = evaluate_cost(reduced, v1, v2, bundle)
        diff = direct.per_path - matched.per_path
        se = float(diff.std(ddof=1) / np.sqrt(diff.size))
        dJ = abs(direct.J - matched.J)
        cost_ok = dJ <= p["n_se"] * se or dJ <= 1e-12 * max(1.0, abs(direct.J))
        rep.checks["cross-term"] = {
            "passed": bool(gap < p["roundtrip_max"] and cost_ok and back < 10 * p["tol"]),
            "control_gap": gap, "roundtrip_stationarity": back, "J_direct": direct.J, "J_reduced": matched.J,
            "J_difference_se": se, "reduced_map_identity": cmap.is_identity(),
        }


_PIPELINES = {
    "drivers": _run_drivers,
    "calculus": _run_calculus,
    "forward": _run_forward,
    "backward": _run_backward,
    "coupled": _run_coupled,
    "lqgame": _run_lqgame,
}


def run_scenario(s: Scenario) -> RunReport:
    """Execute the scenario's pipeline and return its report (artifacts are not written here)."""
    rep = RunReport(name=s.name, target=s.target, settings=s.settings())
    start = time.perf_counter()
    try:
        _PIPELINES[s.target](s, rep)
    except Exception as exc:  # attach scenario context, keep the original as the cause
        raise ScenarioRunError(f"scenario {s.name!r} ({s.target}): {type(exc).__name__}: {exc}") from exc
    rep.wall_time = time.perf_counter() - start
    return rep
