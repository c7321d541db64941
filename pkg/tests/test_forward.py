import numpy as np
import pytest

from fbsde_lab.drivers import simulate_bundle
from fbsde_lab.forward import (
    ContractionError,
    ForwardSpec,
    ParameterError,
    apriori_check,
    decay_diagnostic,
    equivalent_norm,
    euler_solve,
    initial_state,
    picard_solve,
    probe_assumption_a,
)
from fbsde_lab.timegrid import make_grid
from oracles import FROZEN

ONE = lambda t, x, i: np.ones((x.shape[0], 1, 1))  # noqa: E731


def test_euler_deterministic_decay():
    b = simulate_bundle(make_grid(0, 1, 1000), 3, 0)
    sol = euler_solve(ForwardSpec(b=lambda t, x, i: -x, x0=1.0), b)
    np.testing.assert_allclose(sol.x[:, -1, 0], np.exp(-1), rtol=1e-3)


def test_euler_pure_fbm_is_driver_path():
    b = simulate_bundle(make_grid(0, 1, 50), 20, 1)
    sol = euler_solve(ForwardSpec(b=lambda t, x, i: np.zeros_like(x), gamma=lambda t: np.array([1.0])), b)
    np.testing.assert_allclose(sol.x[:, :, 0], b.bh_path, atol=1e-12)


def test_euler_brownian_variance():
    b = simulate_bundle(make_grid(0, 1, 50), 10_000, 2)
    sol = euler_solve(ForwardSpec(b=lambda t, x, i: np.zeros_like(x), sigma=ONE), b)
    x2 = sol.x[:, -1, 0] ** 2
    assert abs(x2.mean() - 1.0) < 5 * x2.std(ddof=1) / np.sqrt(x2.size)


def test_initial_state_forms():
    spec = ForwardSpec(b=lambda t, x, i: x, x0=[1.0, 2.0], n=2)
    np.testing.assert_allclose(initial_state(spec, 3), [[1, 2]] * 3)
    drawn = ForwardSpec(b=lambda t, x, i: x, x0=lambda rng: rng.normal(size=1))
    a, b = initial_state(drawn, 4, seed=1), initial_state(drawn, 8, seed=1)
    np.testing.assert_allclose(a, b[:4])
    with pytest.raises(ValueError):
        initial_state(ForwardSpec(b=lambda t, x, i: x, x0=np.zeros((2, 1))), 3)


def test_equivalent_norm_constant_difference():
    g = make_grid(0, 1, 100)
    # sup_t e^{-a t} t is attained at t = 1/a when 1/a <= 1
    assert equivalent_norm(np.ones((5, 101, 1)), g, 4.0) == pytest.approx(np.sqrt(np.exp(-1) / 4), rel=1e-3)


def test_picard_contracts_on_linear_system():
    b = simulate_bundle(make_grid(0, 1, 100), 500, 3)
    spec = ForwardSpec(b=lambda t, x, i: -x, sigma=ONE, gamma=lambda t: np.array([0.5]), x0=1.0, l_bx=1.0)
    sol, rep = picard_solve(spec, b, a=16.0, tol=1e-8)
    assert rep.factor == pytest.approx((1 - np.exp(-16)) * 2 * 2 / 16)
    assert rep.converged
    assert max(rep.ratios) <= 0.30
    # the Picard fixed point agrees with the Euler scheme up to O(dt)
    ref = euler_solve(spec, b)
    assert np.sqrt(np.mean((sol.x - ref.x) ** 2)) < 1e-2


def test_picard_fixed_point_in_one_iteration():
    b = simulate_bundle(make_grid(0, 1, 20), 10, 0)
    spec = ForwardSpec(b=lambda t, x, i: np.zeros_like(x), x0=2.0, l_bx=1.0)
    sol, rep = picard_solve(spec, b, tol=1e-12)
    assert rep.iterations == 1 and rep.distances == [0.0]
    assert np.all(sol.x == 2.0)


def test_picard_refuses_non_contraction():
    b = simulate_bundle(make_grid(0, 1, 20), 10, 0)
    spec = ForwardSpec(b=lambda t, x, i: -3 * x, l_bx=3.0)
    with pytest.raises(ContractionError):
        picard_solve(spec, b, a=16.0)
    with pytest.raises(ParameterError):
        picard_solve(spec, b, a=0.0)


def test_probe_monotone_drift():
    spec = ForwardSpec(b=lambda t, x, i: -2 * x + np.sin(x), sigma=ONE, kappa_x=1.0, l_bx=3.0)
    rep = probe_assumption_a(spec, sample_count=500)
    assert rep.kappa_x >= 1.0 and rep.l_bx <= 3.0
    assert rep.l_sx == 0.0
    assert rep.violations == []


def test_probe_flags_expanding_drift():
    rep = probe_assumption_a(ForwardSpec(b=lambda t, x, i: x, kappa_x=1.0, l_bx=1.0), sample_count=200)
    assert rep.kappa_x == pytest.approx(-1.0)
    assert len(rep.violations) == 1 and "monotonicity" in rep.violations[0]


@pytest.fixture(scope="module")
def ou_solution():
    b = simulate_bundle(make_grid(0, 6, 600), 4000, 3)
    spec = ForwardSpec(b=lambda t, x, i: -2 * x, sigma=ONE, kappa_x=2.0, l_bx=2.0)
    return spec, euler_solve(spec, b)


def test_decay_matches_closed_form(ou_solution):
    _, sol = ou_solution
    rep = decay_diagnostic(sol, -1.0)
    k = sol.grid.index_of(5.0)
    assert rep.curve[k] == pytest.approx(FROZEN["ou_moment_u5"], rel=0.1)
    assert rep.decaying and rep.tail_slope == pytest.approx(-2.0, abs=0.2)
    assert not decay_diagnostic(sol, 3.0).decaying


def test_decay_of_zero_system():
    b = simulate_bundle(make_grid(0, 1, 10), 100, 0)
    sol = euler_solve(ForwardSpec(b=lambda t, x, i: -x), b)
    assert decay_diagnostic(sol, 5.0).decaying
    with pytest.raises(ValueError):
        decay_diagnostic(euler_solve(ForwardSpec(b=lambda t, x, i: -x), simulate_bundle(b.grid, 10, 0)), 0.0)


def test_apriori_matches_closed_form(ou_solution):
    spec, sol = ou_solution
    rep = apriori_check(spec, sol, -1.0, 0.5)
    assert rep.passed and rep.mode == "single"
    assert rep.lhs == pytest.approx(FROZEN["ou_apriori_lhs"], rel=0.05)
    assert rep.rhs == pytest.approx(FROZEN["ou_apriori_rhs"], rel=0.01)


def test_apriori_stability_and_parameter_range(ou_solution):
    spec, sol = ou_solution
    rep = apriori_check(spec, sol, -1.0, 0.5, spec, sol)
    assert rep.mode == "stability" and rep.lhs == 0.0 and rep.rhs == 0.0 and rep.passed
    with pytest.raises(ParameterError):
        apriori_check(spec, sol, -1.0, 3.0)
    with pytest.raises(ValueError):
        apriori_check(spec, sol, -1.0, 0.5, spec, None)
