import numpy as np
import pytest

from fbsde_lab.calculus import (
    GeneratorInputs,
    TestFunction,
    check_test_function,
    convergence_order,
    fbm_correction,
    generator_apply,
    ito_residual,
)
from fbsde_lab.drivers import simulate_bundle
from fbsde_lab.forward import ForwardSpec, euler_solve
from fbsde_lab.timegrid import make_grid
from oracles import FROZEN

SQUARE = TestFunction(
    value=lambda t, x, i: x[:, 0] ** 2,
    dt=lambda t, x, i: np.zeros(x.shape[0]),
    grad=lambda t, x, i: 2 * x,
    hess=lambda t, x, i: np.full((x.shape[0], 1, 1), 2.0),
)
IDENTITY = TestFunction(
    value=lambda t, x, i: x[:, 0],
    dt=lambda t, x, i: np.zeros(x.shape[0]),
    grad=lambda t, x, i: np.ones_like(x),
    hess=lambda t, x, i: np.zeros((x.shape[0], 1, 1)),
)


def _inputs(b=0.0, sigma=0.0, gamma=0.0, q=((0.0,),), H=0.75):
    return GeneratorInputs(
        b=lambda t, x, i: b * x if b else np.zeros_like(x),
        sigma=lambda t, x, i: np.full((x.shape[0], 1, 1), sigma),
        gamma=lambda t: np.array([gamma]),
        q=np.asarray(q),
        H=H,
    )


def test_generator_ou_square():
    x = np.array([[0.5], [-2.0]])
    val = generator_apply(SQUARE, _inputs(b=-1.0, sigma=1.0), 0.3, x, 1)
    np.testing.assert_allclose(val, -2 * x[:, 0] ** 2 + 1)


def test_generator_fbm_correction():
    val = generator_apply(SQUARE, _inputs(gamma=1.0), 1.0, np.array([[0.7]]), 1)
    assert val == pytest.approx(2 * FROZEN["fbm_correction_t1"], rel=1e-3)
    assert fbm_correction(lambda t: np.array([1.0]), 1.0, 0.75)[0] == pytest.approx(FROZEN["fbm_correction_t1"], rel=1e-3)


def test_generator_of_time_only_function_vanishes():
    tf = TestFunction(
        value=lambda t, x, i: np.full(x.shape[0], 3.0),
        dt=lambda t, x, i: np.zeros(x.shape[0]),
        grad=lambda t, x, i: np.zeros_like(x),
        hess=lambda t, x, i: np.zeros((x.shape[0], 1, 1)),
    )
    assert generator_apply(tf, _inputs(b=-1.0, sigma=2.0, gamma=1.0), 1.0, np.array([[1.0]]), 1) == 0.0


def test_generator_chain_term():
    tf = TestFunction(
        value=lambda t, x, i: i.astype(float) ** 2,
        dt=lambda t, x, i: np.zeros(x.shape[0]),
        grad=lambda t, x, i: np.zeros_like(x),
        hess=lambda t, x, i: np.zeros((x.shape[0], 1, 1)),
    )
    q = [[-2.0, 2.0], [3.0, -3.0]]
    gi = _inputs(q=q)
    assert generator_apply(tf, gi, 0.0, np.array([[0.0]]), 1) == pytest.approx(2.0 * (4 - 1))
    assert generator_apply(tf, gi, 0.0, np.array([[0.0]]), 2) == pytest.approx(3.0 * (1 - 4))


def test_check_test_function_catches_wrong_gradient():
    check_test_function(SQUARE, 0.0, np.array([[0.3]]), 1)
    bad = TestFunction(value=SQUARE.value, dt=SQUARE.dt, grad=lambda t, x, i: 3 * x, hess=SQUARE.hess)
    with pytest.raises(ValueError):
        check_test_function(bad, 0.0, np.array([[0.3]]), 1)


def test_residual_of_linear_function_is_euler_closure():
    g = make_grid(0, 1, 50)
    b = simulate_bundle(g, 200, 1, q=[[-1, 1], [1, -1]])
    spec = ForwardSpec(b=lambda t, x, i: -x + i[:, None], sigma=lambda t, x, i: np.ones((x.shape[0], 1, 1)),
                       gamma=lambda t: np.array([0.5]), x0=0.2)
    x = euler_solve(spec, b).x
    gi = GeneratorInputs(b=spec.b, sigma=spec.sigma, gamma=spec.gamma, q=b.q, H=b.H)
    st = ito_residual(IDENTITY, gi, b, x)
    assert np.max(np.abs(st.per_path)) < 1e-12


def test_residual_brownian_square_mean_zero():
    g = make_grid(0, 1, 100)
    b = simulate_bundle(g, 10_000, 2)
    st = ito_residual(SQUARE, _inputs(sigma=1.0), b, b.w_path[:, :, 0])
    assert abs(st.mean) < 5 * st.se


def test_residual_fbm_square_mean_zero():
    g = make_grid(0, 1, 100)
    b = simulate_bundle(g, 10_000, 2)
    st = ito_residual(SQUARE, _inputs(gamma=1.0), b, b.bh_path)
    assert abs(st.mean) < 5 * st.se


def test_residual_window_and_validation():
    g = make_grid(0, 1, 20)
    b = simulate_bundle(g, 50, 3)
    st = ito_residual(SQUARE, _inputs(sigma=1.0), b, b.w_path[:, :, 0], window=(0.5, 0.5))
    assert np.all(st.per_path == 0.0)
    with pytest.raises(ValueError):
        ito_residual(SQUARE, _inputs(sigma=1.0), b, np.zeros((50, 7)))
    with pytest.raises(ValueError):
        ito_residual(SQUARE, _inputs(sigma=1.0, H=0.6), b, b.w_path[:, :, 0])


def test_convergence_order_slope():
    dts = np.array([0.1, 0.05, 0.025])
    assert convergence_order(dts, 3 * dts**1.5) == pytest.approx(1.5)
