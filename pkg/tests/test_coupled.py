import numpy as np
import pytest

from fbsde_lab.backward import BackwardSpec, solve_truncated
from fbsde_lab.coupled import (
    FBSDESpec,
    Forcing,
    build_tau_family,
    continuation_step,
    coupled_stability_check,
    fit_stability_constant,
    solve_fbsde,
    solve_tau0,
    theta_distance,
    zero_forcing,
)
from fbsde_lab.drivers import simulate_bundle
from fbsde_lab.forward import ForwardSpec, ParameterError, euler_solve
from fbsde_lab.timegrid import make_grid, weighted_l2k_norm
from oracles import FROZEN

TWO = [[-1.0, 1.0], [1.0, -1.0]]


def _linear_spec(c=0.0, **kw):
    return FBSDESpec(
        psi=lambda y, i: np.full(np.shape(y), 1.0 + c),
        b=lambda t, x, y, z, r, f, i: -x,
        sigma=lambda t, x, y, z, r, f, i: np.ones_like(x),
        g=lambda t, x, y, z, r, f, i: y + np.exp(-t),
        gamma=lambda t: 0.5,
        **kw,
    )


def _args(n=4):
    x = np.linspace(-1, 1, n)
    return (0.3, x, 2 * x, x[:, None], x, np.zeros((n, 2)), np.ones(n, dtype=np.int64))


def test_tau_family_endpoints_and_midpoint():
    spec = _linear_spec(kappa_x=2.0, kappa_y=-3.0)
    a = _args()
    s0, s1, sh = (build_tau_family(spec, t) for t in (0.0, 1.0, 0.5))
    np.testing.assert_allclose(s0.b(*a), -2.0 * a[1])
    np.testing.assert_allclose(s0.g(*a), 3.0 * a[2])
    assert np.all(s0.psi(a[2], a[6]) == 0) and s0.gamma(1.0) == 0.0
    np.testing.assert_allclose(s1.b(*a), spec.b(*a))
    np.testing.assert_allclose(s1.g(*a), spec.g(*a))
    np.testing.assert_allclose(sh.b(*a), 0.5 * (s0.b(*a) + s1.b(*a)))
    assert sh.gamma(0.0) == 0.25
    with pytest.raises(ParameterError):
        build_tau_family(spec, 1.5)


def test_level_zero_forward_decay():
    b = simulate_bundle(make_grid(0, 1, 1000), 5, 0)
    fc = zero_forcing(b)
    fc = Forcing(np.ones(5), fc.phi, fc.psi, fc.eta, fc.zeta)
    th = solve_tau0(FBSDESpec(kappa_x=1.0, kappa_y=-1.0, K=0.0), fc, b)
    np.testing.assert_allclose(th.x[:, -1], np.exp(-1), rtol=1e-3)
    assert np.max(np.abs(th.y)) < 1e-12


def test_level_zero_backward_closed_form():
    b = simulate_bundle(make_grid(0, 4, 400), 20, 0)
    fc = zero_forcing(b)
    phi = np.broadcast_to(np.exp(-b.grid.nodes), fc.phi.shape).copy()
    th = solve_tau0(FBSDESpec(kappa_x=1.0, kappa_y=-1.0), Forcing(fc.xi, phi, fc.psi, fc.eta, fc.zeta), b)
    np.testing.assert_allclose(th.y[:, 0], FROZEN["linear_bsde_y0_4"], rtol=5e-3)


def test_admissibility_is_checked():
    b = simulate_bundle(make_grid(0, 1, 10), 5, 0)
    with pytest.raises(ParameterError):
        solve_tau0(FBSDESpec(kappa_x=-1.0, kappa_y=1.0), None, b)
    with pytest.raises(ParameterError):
        solve_fbsde(FBSDESpec(kappa_x=1.0, kappa_y=-1.0, K=2.0), b)


def test_zero_system_has_zero_solution():
    b = simulate_bundle(make_grid(0, 1, 20), 30, 0, q=TWO)
    th, trace = solve_fbsde(FBSDESpec(), b)
    for a in (th.x, th.y, th.z, th.r, th.f):
        assert np.max(np.abs(a)) < 1e-12
    assert trace.taus[-1] == pytest.approx(1.0)


def test_zero_step_returns_prior():
    b = simulate_bundle(make_grid(0, 1, 20), 30, 0)
    prior = solve_tau0(_linear_spec(), None, b)
    th, rep = continuation_step(_linear_spec(), 0.0, 0.0, prior, b)
    assert th is prior and rep.distance == 0.0
    with pytest.raises(ParameterError):
        continuation_step(_linear_spec(), 0.5, 0.6, prior, b)


def test_decoupled_system_matches_sequential_solve():
    b = simulate_bundle(make_grid(0, 2, 40), 200, 4, q=TWO)
    spec = _linear_spec()
    th, trace = solve_fbsde(spec, b, tol=1e-6)
    fwd = euler_solve(
        ForwardSpec(b=lambda t, x, i: -x, sigma=lambda t, x, i: np.ones((x.shape[0], 1, 1)),
                    gamma=lambda t: np.array([0.5]), x0=1.0),
        b,
    ).x[:, :, 0]
    bwd = solve_truncated(BackwardSpec(g=lambda t, y, z, r, f, i: y + np.exp(-t), n_pairs=2), b, 2.0).y
    assert weighted_l2k_norm(th.x - fwd, 0.0, b.grid) < 1e-6
    assert weighted_l2k_norm(th.y - bwd, 0.0, b.grid) < 1e-6
    assert np.isfinite(trace.final_residual) and trace.final_residual < 1e-3


def test_stability_identical_and_scaling():
    b = simulate_bundle(make_grid(0, 1, 20), 100, 1)
    base = _linear_spec()
    th = solve_fbsde(base, b, tol=1e-8)[0]
    same = coupled_stability_check(base, base, th, th, b)
    assert same.lhs == 0.0 and same.details["input"] == 0.0 and same.passed
    reports = []
    for c in (0.1, 0.2):
        other = _linear_spec(c)
        th_c = solve_fbsde(other, b, tol=1e-8)[0]
        reports.append(coupled_stability_check(other, base, th_c, th, b))
    # the system is linear, so both sides scale with c^2
    assert reports[1].lhs / reports[0].lhs == pytest.approx(4.0, rel=0.01)
    assert reports[1].details["ratio"] == pytest.approx(reports[0].details["ratio"], rel=0.01)
    c_hat, margins = fit_stability_constant(reports)
    assert min(margins) >= -1e-12
    th_small = solve_fbsde(_linear_spec(0.1), b, tol=1e-8)[0]
    assert coupled_stability_check(_linear_spec(0.1), base, th_small, th, b, C=c_hat).passed


def test_theta_distance_counts_initial_value():
    b = simulate_bundle(make_grid(0, 1, 10), 4, 0)
    th = solve_tau0(FBSDESpec(), None, b)
    shifted = type(th)(th.grid, th.x, th.y + 1.0, th.z, th.r, th.f)
    # |dy(0)|^2 + int_0^1 |dy|^2 ds = 2
    assert theta_distance(th, shifted, 0.0) == pytest.approx(np.sqrt(2.0))
