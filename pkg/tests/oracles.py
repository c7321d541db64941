"""Independent reference computations for the test suite.

Each function computes a reference value without using the package (closed
forms or :mod:`scipy.integrate` quadrature).  ``FROZEN`` holds their values;
``test_oracles.py`` checks that the functions still reproduce them, and the
module tests compare the package against ``FROZEN``.
"""

import numpy as np
from scipy.integrate import quad


def kernel_value(u, s, H):
    return H * (2 * H - 1) * abs(u - s) ** (2 * H - 2)


def indicator_energy(t, H):
    """Double kernel integral of the indicator of [0, t], inner integral done analytically."""
    inner = lambda u: H * (u ** (2 * H - 1) + (t - u) ** (2 * H - 1))  # noqa: E731
    return quad(inner, 0.0, t)[0]


def fbm_correction_const_gamma(t, H):
    """``H(2H-1) int_0^t |u - t|^{2H-2} du`` (algebraic endpoint weight)."""
    val = quad(lambda u: 1.0, 0.0, t, weight="alg", wvar=(0.0, 2 * H - 2))[0]
    return H * (2 * H - 1) * val


def weighted_norm_exp(K=1.0, T=20.0):
    """``sqrt(int_0^T |e^{-2s} e^{Ks}|^2 ds)``."""
    return np.sqrt(quad(lambda s: np.exp(-4 * s + 2 * K * s), 0.0, T)[0])


def ou_weighted_moment(u, kappa=2.0, K=-1.0):
    """``E|x(u)|^2 e^{2Ku}`` for ``dx = -kappa x ds + dW``, ``x0 = 0``."""
    return (1 - np.exp(-2 * kappa * u)) / (2 * kappa) * np.exp(2 * K * u)


def ou_apriori_sides(T=6.0, kappa=2.0, K=-1.0, mu=0.5):
    """Both sides of the forward energy bound for the OU test system on [0, T]."""
    coef = 2 * kappa - 2 * K - 2 * mu
    lhs = coef * quad(lambda s: ou_weighted_moment(s, kappa, K), 0.0, T)[0]
    rhs = quad(lambda s: np.exp(2 * K * s), 0.0, T)[0]  # sigma(s, 0) = 1
    return lhs, rhs


def exp_bsde_y(t, n):
    """Solution of ``dy = e^{-s} ds``, ``y(n) = 0``: ``-(e^{-t} - e^{-n})`` on ``[0, n]``."""
    return np.where(t <= n, -(np.exp(-t) - np.exp(-n)), 0.0)


def exp_bsde_level_distance(n1, n2, K, T):
    """Weighted distance between the truncated solutions at levels ``n1 < n2``."""
    f = lambda s: (exp_bsde_y(s, n2) - exp_bsde_y(s, n1)) ** 2 * np.exp(2 * K * s)  # noqa: E731
    return np.sqrt(quad(f, 0.0, n1)[0] + quad(f, n1, n2)[0] + (quad(f, n2, T)[0] if T > n2 else 0.0))


def exp_bsde_estimate_sides(n=8.0, K=1.0, L=0.25, mu=0.5):
    """Energy estimate sides for the deterministic solution (z = r = f = 0)."""
    y0 = exp_bsde_y(0.0, n)
    lhs = y0**2 + (2 * K - 2 * L - mu) * quad(lambda s: exp_bsde_y(s, n) ** 2 * np.exp(2 * K * s), 0.0, n)[0]
    rhs = quad(lambda s: np.exp(-2 * s) * np.exp(2 * K * s), 0.0, n)[0] / mu
    return lhs, rhs


def linear_bsde_y0(T):
    """``dy = (y + e^{-s}) ds``, ``y(T) = 0``: ``y(0) = -(1 - e^{-2T})/2``."""
    return -(1 - np.exp(-2 * T)) / 2


def deterministic_control_cost(T, K):
    """``1/2 int_0^T (e^{-s})^2 e^{2Ks} ds``: cost of a unit player-1 control e^{-s}."""
    return 0.5 * quad(lambda s: np.exp(-2 * s + 2 * K * s), 0.0, T)[0]


def decoupled_game_mean_y0(T):
    """``E y(0) = int_0^T e^{-2s} E x(s) ds`` with ``E x(s) = e^{-s}``."""
    return quad(lambda s: np.exp(-3 * s), 0.0, T)[0]


FROZEN = {
    "kernel_3_1_09": 0.6267964055732095,
    "indicator_energy_1": 1.0000000000000004,
    "indicator_energy_2": 2.8284271247461885,
    "fbm_correction_t1": 0.75,
    "weighted_norm_exp": 0.7071067811865476,
    "ou_moment_u5": 1.1349982417227156e-05,
    "ou_apriori_lhs": 0.4166628265339459,
    "ou_apriori_rhs": 0.4999969278938233,
    "exp_bsde_y0_8": -0.9996645373720975,
    "exp_bsde_distance_4_6": 0.042099106011186466,
    "exp_bsde_distance_6_8": 0.007728080832917336,
    "exp_bsde_ratio": 0.18356876345221798,
    "exp_bsde_lhs": 7.500000056267586,
    "exp_bsde_rhs": 16.0,
    "linear_bsde_y0_4": -0.49983226868604874,
    "control_cost_T3_K0": 0.24938031195583343,
    "control_cost_T3_Khalf": 0.16664609836598554,
    "decoupled_game_y0_T3": 0.3332921967319711,
}
