"""Extended generator and a pathwise check of the mixed Ito formula.

For ``dx = b ds + sum_i sigma_i dW_i + gamma dB^H`` with regime switching,

    L f = d_t f + b . grad f + 1/2 tr(hess f . A) + sum_j q_ij [f(., j) - f(., i)],

where ``A = sigma sigma^T + gamma c^T + c gamma^T`` and
``c(t) = H(2H-1) int_{t0}^t |u - t|^{2H-2} gamma(u) du`` is the fractional
correction.  For ``gamma = 1`` the correction contributes ``2H t^{2H-1}``
to ``L x^2``, i.e. exactly ``d/dt E[B^H(t)^2]``.

The fBm integral in the Ito formula is the divergence (Wick) integral, which
has mean zero.  It is estimated by left-point Riemann sums minus the discrete
Malliavin trace ``gamma_k^T hess f . sum_{j<k} Cov(dB_j, dB_k) gamma_j``; the
state's Malliavin derivative is taken to be ``gamma`` (exact for additive fBm
noise with no drift feedback, which is the family the checks use).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .drivers import DriverBundle, validate_generator
from .timegrid import TimeGrid, cell_kernel_weights, history_kernel_weights, validate_hurst

__all__ = [
    "TestFunction",
    "GeneratorInputs",
    "ResidualStats",
    "check_test_function",
    "fbm_correction",
    "generator_apply",
    "ito_residual",
    "convergence_order",
]


@dataclass(frozen=True)
class TestFunction:
    """``f(t, x, i)`` with its derivatives; ``x`` is ``(paths, n)``, ``i`` is ``(paths,)``.

    ``value`` and ``dt`` return ``(paths,)``, ``grad`` returns ``(paths, n)``
    and ``hess`` returns ``(paths, n, n)``.
    """

    __test__ = False  # not a pytest class

    value: Callable
    dt: Callable
    grad: Callable
    hess: Callable


@dataclass(frozen=True)
class GeneratorInputs:
    """Coefficients of the forward equation seen by the generator.

    ``b(t, x, i) -> (paths, n)``, ``sigma(t, x, i) -> (paths, n, d)`` and the
    deterministic ``gamma(t) -> (n,)``.  ``t0`` is where the fBm history starts.
    """

    b: Callable
    sigma: Callable
    gamma: Callable
    q: np.ndarray
    H: float
    t0: float = 0.0

    def __post_init__(self) -> None:
        validate_hurst(self.H)
        object.__setattr__(self, "q", validate_generator(self.q))


@dataclass(frozen=True)
class ResidualStats:
    """Ensemble statistics of the per-path Ito residual."""

    mean: float
    se: float
    rms: float
    per_path: np.ndarray

    @property
    def mse(self) -> float:
        return self.rms**2


def _prep(x, i):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x) if x.ndim == 1 else (x.reshape(1, 1) if x.ndim == 0 else x)
    i = np.broadcast_to(np.asarray(i, dtype=np.int64), (x.shape[0],))
    return x, i, single


def check_test_function(tf: TestFunction, t: float, x, i, h: float = 1e-5, rtol: float = 1e-4) -> None:
    """Raise ``ValueError`` if the Hessian is asymmetric or the gradient disagrees
    with central differences of the value at the sample points."""
    x, i, _ = _prep(x, i)
    hess = np.asarray(tf.hess(t, x, i), dtype=float)
    if not np.allclose(hess, np.swapaxes(hess, 1, 2), atol=1e-8):
        raise ValueError("Hessian is not symmetric at the sampled points")
    grad = np.asarray(tf.grad(t, x, i), dtype=float)
    fd = np.empty_like(grad)
    for a in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[a] = h
        fd[:, a] = (tf.value(t, x + e, i) - tf.value(t, x - e, i)) / (2 * h)
    scale = np.maximum(np.abs(fd), 1.0)
    if np.any(np.abs(grad - fd) > rtol * scale):
        raise ValueError("gradient does not match central differences of the value")


def fbm_correction(gamma: Callable, t: float, H: float, t0: float = 0.0, n_cells: int = 1024) -> np.ndarray:
    """``H(2H-1) int_{t0}^t |u - t|^{2H-2} gamma(u) du`` by product integration.

    ``gamma`` is sampled at cell midpoints and the kernel is integrated exactly
    on each cell, so constant ``gamma`` gives ``H (t - t0)^{2H-1} gamma`` exactly.
    """
    g0 = np.atleast_1d(np.asarray(gamma(t0), dtype=float))
    if t <= t0:
        return np.zeros_like(g0)
    nodes = np.linspace(t0, t, n_cells + 1)
    w = history_kernel_weights(nodes, t, H)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    vals = np.stack([np.atleast_1d(np.asarray(gamma(u), dtype=float)) for u in mids])
    return w @ vals


def _jump_term(tf: TestFunction, t: float, x: np.ndarray, i: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``sum_j q_ij [f(t, x, j) - f(t, x, i)]`` for each path's own regime ``i``."""
    m = q.shape[0]
    here = tf.value(t, x, i)
    out = np.zeros(x.shape[0])
    for j in range(1, m + 1):
        rate = q[i - 1, j - 1]
        if np.any(rate != 0):
            out += np.where(i == j, 0.0, rate) * (tf.value(t, x, np.full_like(i, j)) - here)
    return out


def generator_apply(tf: TestFunction, gi: GeneratorInputs, t: float, x, i0) -> np.ndarray | float:
    """Evaluate the extended generator ``L f`` at ``(t, x, i0)``."""
    if t < gi.t0:
        raise ValueError(f"t={t} lies before the start of the fBm history t0={gi.t0}")
    x, i, single = _prep(x, i0)
    grad = np.asarray(tf.grad(t, x, i), dtype=float)
    hess = np.asarray(tf.hess(t, x, i), dtype=float)
    sig = np.asarray(gi.sigma(t, x, i), dtype=float).reshape(x.shape[0], x.shape[1], -1)
    A = np.einsum("pad,pbd->pab", sig, sig)
    gam = np.atleast_1d(np.asarray(gi.gamma(t), dtype=float))
    c = fbm_correction(gi.gamma, t, gi.H, gi.t0)
    A = A + (np.outer(gam, c) + np.outer(c, gam))[None]
    out = (
        np.asarray(tf.dt(t, x, i), dtype=float)
        + np.einsum("pa,pa->p", np.asarray(gi.b(t, x, i), dtype=float), grad)
        + 0.5 * np.einsum("pab,pba->p", hess, A)
        + _jump_term(tf, t, x, i, gi.q)
    )
    return float(out[0]) if single else out


def ito_residual(
    tf: TestFunction,
    gi: GeneratorInputs,
    bundle: DriverBundle,
    x_paths: np.ndarray,
    window: tuple[float, float] | None = None,
) -> ResidualStats:
    """Per-path ``f(t2) - [f(t1) + int L f ds + stochastic integrals]`` on ``window``.

    Conventions: drift, diffusion and the Brownian integral use the state and
    regime at the left end of each step; the chain term of ``L f`` uses the
    exact occupation time of each regime in the step, matching the exact
    compensators of ``M_ij``; the fractional correction is integrated exactly
    over each step with the Hessian frozen at the left end.
    """
    grid: TimeGrid = bundle.grid
    x = np.asarray(x_paths, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[:2] != (bundle.n_paths, grid.n_nodes):
        raise ValueError(
            f"x_paths shape {x.shape[:2]} does not match the bundle ({bundle.n_paths}, {grid.n_nodes})"
        )
    if abs(gi.H - bundle.H) > 1e-12:
        raise ValueError("generator inputs and bundle use different Hurst indices")
    t1, t2 = (grid.t0, grid.t_end) if window is None else window
    k1, k2 = grid.index_of(t1), grid.index_of(t2)
    if k2 < k1:
        raise ValueError("window must satisfy t1 <= t2")

    nodes = grid.nodes
    dt = grid.dt
    regime = bundle.regime_path
    dW = bundle.w_increments
    dB = bundle.bh_increments
    dM = bundle.m_increments
    occ = bundle.occupation
    q = bundle.q
    m = q.shape[0]

    # deterministic fractional pieces on the bundle grid
    gam = np.stack([np.atleast_1d(np.asarray(gi.gamma(s), dtype=float)) for s in nodes[:-1]])
    w = cell_kernel_weights(grid.n_steps, dt, gi.H)

    total = np.zeros(bundle.n_paths)
    for k in range(k1, k2):
        tk = float(nodes[k])
        xk = x[:, k, :]
        ik = regime[:, k]
        grad = np.asarray(tf.grad(tk, xk, ik), dtype=float)
        hess = np.asarray(tf.hess(tk, xk, ik), dtype=float)
        sig = np.asarray(gi.sigma(tk, xk, ik), dtype=float).reshape(xk.shape[0], xk.shape[1], -1)
        A = np.einsum("pad,pbd->pab", sig, sig)
        drift = (
            np.asarray(tf.dt(tk, xk, ik), dtype=float)
            + np.einsum("pa,pa->p", np.asarray(gi.b(tk, xk, ik), dtype=float), grad)
            + 0.5 * np.einsum("pab,pba->p", hess, A)
        ) * dt

        # fractional correction integrated over the step and the matching Wick trace
        hist = w[k:0:-1] @ gam[:k] if k > 0 else np.zeros(gam.shape[1])  # sum_{j<k} w_{k-j} gamma_j
        G = np.outer(gam[k], hist) + np.outer(hist, gam[k]) + w[0] * np.outer(gam[k], gam[k])
        drift = drift + 0.5 * np.einsum("pab,ba->p", hess, G)

        # chain part of L f weighted by exact occupation times
        for r in range(1, m + 1):
            if np.any(occ[:, k, r - 1] > 0):
                drift = drift + occ[:, k, r - 1] * _jump_term(tf, tk, xk, np.full_like(ik, r), q)

        brownian = np.einsum("pa,pad,pd->p", grad, sig, dW[:, k, :])
        wick = np.einsum("a,pab,b->p", gam[k], hess, hist)
        fractional = (grad @ gam[k]) * dB[:, k] - wick

        jumps = np.zeros(bundle.n_paths)
        for c, (a, b) in enumerate(bundle.pairs):
            inc = dM[:, k, c]
            if np.any(inc != 0):
                fa = tf.value(tk, xk, np.full_like(ik, a))
                fb = tf.value(tk, xk, np.full_like(ik, b))
                jumps += (fb - fa) * inc

        total += drift + brownian + fractional + jumps

    lhs = tf.value(t2, x[:, k2, :], regime[:, k2]) - tf.value(t1, x[:, k1, :], regime[:, k1])
    res = np.asarray(lhs, dtype=float) - total
    n = res.size
    se = float(np.std(res, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return ResidualStats(
        mean=float(np.mean(res)),
        se=se,
        rms=float(np.sqrt(np.mean(res**2))),
        per_path=res,
    )


def convergence_order(dts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
