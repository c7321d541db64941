"""End-to-end acceptance checks.

Every builtin scenario is run once through the command line entry point; the
criteria below read the written summaries.  Each test prints a single
``criterion N: PASS/FAIL ...`` line (run with ``-s`` to see them inline; they
are also repeated in the terminal summary).
"""

import json

import numpy as np
import pytest

from fbsde_lab.catalog import builtin_data, builtin_names
from fbsde_lab.cli import main
from fbsde_lab.timegrid import l2h_norm, make_grid

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Run every builtin at its default settings; map scenario name -> (summary, wall time)."""
    out = tmp_path_factory.mktemp("acceptance")
    codes = {name: main(["builtin", name, "--out", str(out)]) for name in builtin_names()}
    results = {}
    for name in builtin_names():
        for scenario in builtin_data(name):
            sname = scenario["name"]
            summary = json.loads((out / f"{sname}.summary.json").read_text())
            timing = json.loads((out / f"{sname}.timing.json").read_text())["wall_time_seconds"]
            results[sname] = (summary, timing)
    return {"dir": out, "codes": codes, "results": results}


def _check(runs, scenario, check):
    return runs["results"][scenario][0]["checks"][check]


def _time(runs, *scenarios):
    return sum(runs["results"][s][1] for s in scenarios)


def test_criterion_1_fbm_law(runs, record_criterion):
    names = [f"fbm-covariance-h{tag}" for tag in ("060", "075", "090")]
    checks = [_check(runs, n, "fbm-covariance") for n in names]
    elapsed = _time(runs, *names)
    ok = all(c["passed"] and c["max_z"] <= 5.0 for c in checks) and elapsed < 30.0
    record_criterion(1, ok, f"max |z| = {max(c['max_z'] for c in checks):.2f} (limit 5), {elapsed:.1f}s (limit 30s)")
    assert ok


def test_criterion_2_kernel_identity(record_criterion):
    H = 0.75
    grid = make_grid(0.0, 2.0, 2000)
    errors = []
    for t in (1.0, 2.0):
        indicator = (grid.nodes <= t).astype(float)
        errors.append(abs(l2h_norm(indicator, H, grid) / t ** (2 * H) - 1.0))
    ok = max(errors) < 0.01
    record_criterion(2, ok, f"relative errors {errors[0]:.2e}, {errors[1]:.2e} (limit 1e-2)")
    assert ok


def test_criterion_3_ito_formula(runs, record_criterion):
    names = ["ito-residual-bm", "ito-residual-fbm", "ito-residual-chain"]
    res = {n: _check(runs, n, "ito-residual") for n in names}
    order = {n: _check(runs, n, "convergence-order") for n in names}
    elapsed = _time(runs, *names)
    ok = (
        all(r["passed"] and r["max_z"] <= 5.0 for r in res.values())
        and order["ito-residual-bm"]["mse_order"] >= 0.8
        and order["ito-residual-fbm"]["mse_order"] >= 0.5
        and order["ito-residual-chain"]["passed"]
        and elapsed < 120.0
    )
    record_criterion(
        3, ok,
        f"max |z| = {max(r['max_z'] for r in res.values()):.2f}; orders BM {order['ito-residual-bm']['mse_order']:.2f}"
        f" fBm {order['ito-residual-fbm']['mse_order']:.2f} (chain exact); {elapsed:.1f}s",
    )
    assert ok


def test_criterion_4_picard(runs, record_criterion):
    c = _check(runs, "picard-contraction", "picard")
    ok = c["passed"] and c["max_ratio"] <= 0.30 and c["distance_to_euler"] <= 1e-3 and abs(c["factor"] - 0.25) < 1e-3
    record_criterion(4, ok, f"factor {c['factor']:.3f}, max ratio {c['max_ratio']:.3g} (limit 0.30), "
                            f"distance to Euler {c['distance_to_euler']:.2e} (limit 1e-3)")
    assert ok


def test_criterion_5_decay(runs, record_criterion):
    good = _check(runs, "decay-admissible", "decay")
    bad = _check(runs, "decay-inadmissible", "decay")
    ok = good["passed"] and good["value_at_u"] < 1e-4 and good["monotone"] and bad["passed"] and not bad["decaying"]
    record_criterion(5, ok, f"E|x(5)|^2 e^(-10) = {good['value_at_u']:.3e} (limit 1e-4), monotone {good['monotone']}, "
                            f"K=3 flagged {not bad['decaying']}")
    assert ok


def test_criterion_6_apriori(runs, record_criterion):
    fwd = _check(runs, "decay-admissible", "apriori")
    bwd = _check(runs, "bsde-estimate", "estimate")
    ok = (fwd["passed"] and bwd["passed"] and fwd["margin"] > 0 and bwd["margin"] > 0
          and fwd["stability_lhs"] == 0.0 and bwd["stability_lhs"] == 0.0)
    record_criterion(6, ok, f"forward margin {fwd['margin']:.3g}, backward margin {bwd['margin']:.3g}, "
                            f"stability LHS {fwd['stability_lhs']}, {bwd['stability_lhs']}")
    assert ok


def test_criterion_7_truncation(runs, record_criterion):
    c = _check(runs, "bsde-truncation", "truncation")
    d = c["distances"]
    ratio = d[1] / d[0]
    ok = (c["passed"] and abs(c["y0"] + 1.0) <= 0.02 and d[1] < d[0] and abs(ratio / np.exp(-2.0) - 1.0) <= 0.5)
    record_criterion(7, ok, f"y(0) = {c['y0']:.4f} (target -1 +-2%), distances {d[0]:.4g} > {d[1]:.4g}, "
                            f"ratio {ratio:.3f} vs e^-2 = {np.exp(-2):.3f} (+-50%)")
    assert ok


def test_criterion_8_continuation(runs, record_criterion):
    cont = _check(runs, "nonlinear-continuation", "continuation")
    rule = _check(runs, "nonlinear-continuation", "delta-rule")
    lin = {k: _check(runs, "continuation-linear", k) for k in ("continuation", "delta-rule", "oracle")}
    ok = (cont["passed"] and cont["tau_reached"] == 1.0 and cont["final_residual"] < 1e-3 and rule["passed"]
          and all(c["passed"] for c in lin.values())
          and max(lin["oracle"]["x_distance"], lin["oracle"]["y_distance"]) <= 1e-3)
    record_criterion(
        8, ok,
        f"nonlinear example: tau=1 reached, residual {cont['final_residual']:.2e}, {len(cont['deltas'])} steps, "
        f"delta rule {rule['passed']}; decoupled linear: oracle gaps {lin['oracle']['x_distance']:.1e}, "
        f"{lin['oracle']['y_distance']:.1e}",
    )
    assert ok


def test_criterion_9_saddle(runs, record_criterion):
    summary = runs["results"]["zero-sum-game"][0]
    zero = summary["checks"]["zero-saddle"]
    saddle = summary["checks"]["saddle"]
    n_paths = summary["settings"]["mc"]["n_paths"]
    ok = (zero["passed"] and max(zero["u_norms"]) < 1e-2 and abs(zero["J"]) <= 3 * zero["J_se"]
          and saddle["passed"] and saddle["violations"] == 0 and saddle["n_records"] == 20 * 2 * 3
          and n_paths == 10_000)
    record_criterion(9, ok, f"|u| = {max(zero['u_norms']):.1e}, J = {zero['J']:.1e} (se {zero['J_se']:.1e}), "
                            f"{saddle['violations']} violations in {saddle['n_records']} perturbed costs")
    assert ok


def test_criterion_10_stationarity_and_cross_term(runs, record_criterion):
    stat = [_check(runs, n, "stationarity")["residual"] for n in ("zero-sum-game", "cross-term-roundtrip")]
    ct = _check(runs, "cross-term-roundtrip", "cross-term")
    cost_gap = abs(ct["J_direct"] - ct["J_reduced"])
    ok = (max(stat) < 1e-6 and ct["passed"] and ct["control_gap"] < 1e-3
          and (cost_gap <= 3 * ct["J_difference_se"] or cost_gap <= 1e-12))
    record_criterion(10, ok, f"stationarity {max(stat):.1e} (limit 1e-6), round-trip control gap "
                             f"{ct['control_gap']:.1e} (limit 1e-3), J {ct['J_direct']:.6f} vs {ct['J_reduced']:.6f}")
    assert ok


def test_criterion_11_determinism(runs, tmp_path, record_criterion):
    """Rerun every builtin with its seed and compare the summaries byte for byte."""
    mismatched, compared = [], 0
    again = tmp_path / "again"
    for name in builtin_names():
        assert main(["builtin", name, "--out", str(again)]) == runs["codes"][name]
        for scenario in builtin_data(name):
            f = f"{scenario['name']}.summary.json"
            compared += 1
            if (again / f).read_bytes() != (runs["dir"] / f).read_bytes():
                mismatched.append(scenario["name"])
    ok = not mismatched
    record_criterion(11, ok, f"{compared} summaries compared, mismatches: {mismatched or 'none'}")
    assert ok


def test_all_builtins_exit_cleanly(runs):
    assert runs["codes"] == {name: 0 for name in builtin_names()}
