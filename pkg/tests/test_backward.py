import numpy as np
import pytest

from fbsde_lab.backward import (
    BackwardSpec,
    bsde_estimate_check,
    solve_infinite,
    solve_truncated,
    truncate_driver,
)
from fbsde_lab.drivers import simulate_bundle
from fbsde_lab.forward import ParameterError
from fbsde_lab.timegrid import make_grid
from oracles import FROZEN

TWO = [[-1.0, 1.0], [1.0, -1.0]]


def _const(c):
    return lambda t, y, z, r, f, i: np.full(np.shape(y), float(c))


def test_truncate_driver():
    g = truncate_driver(lambda t, y, *a: y + t, 2.0)
    y = np.array([1.0, 2.0])
    np.testing.assert_allclose(g(1.0, y), [2.0, 3.0])
    np.testing.assert_allclose(g(2.0, y), [3.0, 4.0])
    np.testing.assert_allclose(g(2.5, y), [0.0, 0.0])


def test_constant_driver_is_exact():
    b = simulate_bundle(make_grid(0, 3, 60), 100, 0, q=TWO)
    sol = solve_truncated(BackwardSpec(g=_const(1.0), n_pairs=2), b, 2.0)
    k2 = b.grid.index_of(2.0)
    np.testing.assert_allclose(sol.y[:, 0], -2.0, atol=1e-10)
    np.testing.assert_allclose(sol.y[:, k2:], 0.0, atol=1e-12)
    for a in (sol.z, sol.r, sol.f):
        assert np.max(np.abs(a)) < 1e-10


@pytest.mark.parametrize("g", [_const(0.0), lambda t, y, z, r, f, i: -y])
def test_zero_solution(g):
    b = simulate_bundle(make_grid(0, 1, 20), 50, 1)
    sol = solve_truncated(BackwardSpec(g=g), b, 1.0)
    assert np.max(np.abs(sol.y)) < 1e-12


def test_truncation_beyond_horizon():
    b = simulate_bundle(make_grid(0, 1, 20), 5, 1)
    with pytest.raises(ValueError):
        solve_truncated(BackwardSpec(g=_const(1.0)), b, 2.0)


@pytest.fixture(scope="module")
def exp_infinite():
    b = simulate_bundle(make_grid(0, 8, 800), 200, 1)
    spec = BackwardSpec(g=lambda t, y, z, r, f, i: np.full(np.shape(y), np.exp(-t)), K=0.1)
    return b, solve_infinite(spec, b, tol=1e-3)


def test_infinite_horizon_levels(exp_infinite):
    _, (sol, rep) = exp_infinite
    assert rep.levels == [4.0, 6.0, 8.0]
    assert np.mean(sol.y[:, 0]) == pytest.approx(FROZEN["exp_bsde_y0_8"], rel=0.02)
    d = rep.distances
    assert d[0] == pytest.approx(FROZEN["exp_bsde_distance_4_6"], rel=0.03)
    assert d[1] == pytest.approx(FROZEN["exp_bsde_distance_6_8"], rel=0.03)
    assert d[1] / d[0] == pytest.approx(FROZEN["exp_bsde_ratio"], rel=0.05)
    assert not rep.converged


def test_infinite_horizon_zero_driver():
    b = simulate_bundle(make_grid(0, 8, 80), 20, 1)
    sol, rep = solve_infinite(BackwardSpec(g=_const(0.0), K=0.1), b)
    assert rep.converged and rep.distances == [0.0] and rep.levels == [4.0, 6.0]


def test_infinite_horizon_needs_positive_discount():
    b = simulate_bundle(make_grid(0, 8, 80), 20, 1)
    with pytest.raises(ParameterError):
        solve_infinite(BackwardSpec(g=_const(0.0), K=0.0), b)
    with pytest.raises(ValueError):
        solve_infinite(BackwardSpec(g=_const(0.0), K=0.1), b, n_schedule=(6.0, 4.0))


def test_energy_estimate_matches_closed_form(exp_infinite):
    b, _ = exp_infinite
    spec = BackwardSpec(g=lambda t, y, z, r, f, i: np.full(np.shape(y), np.exp(-t)), K=1.0, L=0.25)
    sol = solve_truncated(spec, b, 8.0)
    rep = bsde_estimate_check(spec, sol, 0.5)
    assert rep.passed
    assert rep.lhs == pytest.approx(FROZEN["exp_bsde_lhs"], rel=0.03)
    assert rep.rhs == pytest.approx(FROZEN["exp_bsde_rhs"], rel=1e-3)
    same = bsde_estimate_check(spec, sol, 0.5, spec, sol)
    assert same.lhs == 0.0 and same.rhs == 0.0
    with pytest.raises(ParameterError):
        bsde_estimate_check(spec, sol, 2.0)


def test_affine_declaration_is_checked():
    BackwardSpec(g=lambda t, y, z, r, f, i: 2 * y + 1, affine=(2.0, 0.0, 0.0, 0.0, lambda t, i: np.ones(i.shape)))
    with pytest.raises(ValueError):
        BackwardSpec(g=lambda t, y, z, r, f, i: 2 * y + 1, affine=(1.0, 0.0, 0.0, 0.0, lambda t, i: np.ones(i.shape)))
