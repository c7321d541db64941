import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsde_lab.timegrid import (
    DegenerateInputError,
    GridError,
    SingularityError,
    cell_kernel_weights,
    history_kernel_weights,
    l2h_norm,
    make_grid,
    phi_h,
    weighted_l2k_norm,
    weighted_l2k_report,
    weighted_sq_integrals,
)
from oracles import FROZEN


def test_grid_nodes():
    np.testing.assert_allclose(make_grid(0, 1, 4).nodes, [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_allclose(make_grid(0, 2, 1).nodes, [0, 2])


@pytest.mark.parametrize("args", [(1, 1, 4), (2, 1, 4), (0, 1, 0), (-1, 1, 4), (0, np.inf, 3)])
def test_invalid_grid(args):
    with pytest.raises(GridError):
        make_grid(*args)


def test_index_of_and_restrict():
    g = make_grid(0, 2, 200)
    assert g.index_of(0.5) == 50
    assert g.restrict(1.0).n_steps == 100
    assert g.restrict(1.0).t_end == 1.0
    with pytest.raises(GridError):
        g.index_of(0.505)


def test_kernel_values():
    assert phi_h(2, 1, 0.75) == pytest.approx(0.375)
    assert phi_h(1, 2, 0.75) == pytest.approx(0.375)
    assert phi_h(3, 1, 0.9) == pytest.approx(FROZEN["kernel_3_1_09"], rel=1e-12)


def test_kernel_rejects_diagonal_and_bad_hurst():
    with pytest.raises(SingularityError):
        phi_h(1.0, 1.0, 0.75)
    with pytest.raises(ValueError):
        phi_h(2.0, 1.0, 0.5)


def test_cell_weights_are_increment_covariances():
    # summing all cell-pair weights of [0, t] gives Var B^H(t) = t^{2H}
    n, t, H = 50, 2.0, 0.7
    w = cell_kernel_weights(n, t / n, H)
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    assert w[lag].sum() == pytest.approx(t ** (2 * H), rel=1e-12)


def test_history_weights_integrate_kernel():
    nodes = np.linspace(0.0, 1.0, 11)
    H = 0.75
    # int_0^1 phi_H(1.5, u) du = H [(1.5)^{2H-1} - (0.5)^{2H-1}]
    assert history_kernel_weights(nodes, 1.5, H).sum() == pytest.approx(H * (1.5**0.5 - 0.5**0.5), rel=1e-12)


def test_weighted_norm_examples():
    g = make_grid(0, 1, 10)
    assert weighted_l2k_norm(np.zeros((3, 11)), 1.0, g) == 0.0
    assert weighted_l2k_norm(np.ones((4, 11)), 0.0, g) == pytest.approx(1.0)
    g20 = make_grid(0, 20, 20000)
    f = np.exp(-2 * g20.nodes)
    assert weighted_l2k_norm(f, 1.0, g20) == pytest.approx(FROZEN["weighted_norm_exp"], rel=1e-4)


def test_weighted_norm_shapes_and_errors():
    g = make_grid(0, 1, 10)
    vec = np.ones((5, 11, 2))
    assert weighted_l2k_norm(vec, 0.0, g) == pytest.approx(np.sqrt(2.0))
    assert weighted_sq_integrals(vec, 0.0, g).shape == (5,)
    with pytest.raises(DegenerateInputError):
        weighted_l2k_norm(np.ones((3, 7)), 0.0, g)
    with pytest.raises(DegenerateInputError):
        weighted_l2k_norm(np.array([]), 0.0, g)


def test_tail_report_for_negative_k():
    g = make_grid(0, 2, 200)
    rep = weighted_l2k_report(np.ones((2, 201)), -1.0, g)
    assert rep.tail_bound == pytest.approx(np.exp(-4) / 2)
    assert weighted_l2k_report(np.ones((2, 201)), 0.5, g).tail_bound is None


@pytest.mark.parametrize("t,key", [(1.0, "indicator_energy_1"), (2.0, "indicator_energy_2")])
def test_l2h_indicator_on_own_grid(t, key):
    g = make_grid(0, t, 400)
    assert l2h_norm(np.ones(401), 0.75, g) == pytest.approx(FROZEN[key], rel=1e-10)


def test_l2h_zero_and_vector_paths():
    g = make_grid(0, 1, 20)
    assert l2h_norm(np.zeros(21), 0.75, g) == 0.0
    two = np.ones((21, 2))
    assert l2h_norm(two, 0.75, g) == pytest.approx(2.0)


def test_l2h_linear_path_closed_form():
    # int int u s H(2H-1)|u-s|^{2H-2} du ds over [0,1]^2 = 1/(2H+2) (inner integral is a Beta function)
    for H in (0.6, 0.75, 0.9):
        g = make_grid(0, 1, 2000)
        assert l2h_norm(g.nodes, H, g) == pytest.approx(1.0 / (2 * H + 2), rel=1e-5)


@settings(max_examples=30, deadline=None)
@given(
    c=st.floats(-10, 10, allow_nan=False),
    H=st.floats(0.55, 0.95),
    K=st.floats(-1, 1),
    values=st.lists(st.floats(-5, 5, allow_nan=False), min_size=11, max_size=11),
)
def test_norms_are_homogeneous(c, H, K, values):
    g = make_grid(0, 1, 10)
    f = np.asarray(values)
    assert l2h_norm(c * f, H, g) == pytest.approx(c**2 * l2h_norm(f, H, g), rel=1e-9, abs=1e-12)
    assert weighted_l2k_norm(c * f, K, g) == pytest.approx(abs(c) * weighted_l2k_norm(f, K, g), rel=1e-9, abs=1e-12)
    assert l2h_norm(f, H, g) >= -1e-12  # a covariance energy is never negative
