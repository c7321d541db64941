"""Infinite-horizon BSDE by truncation and least-squares Monte Carlo.

    dy = g(s, y, z, r, f, alpha) ds + sum_i z_i dW_i + r dB^H + f . dM,

solved on ``[t0, n]`` with ``y(n) = 0`` for the truncated driver
``g_n = 1_{[0, n]} g`` and then over an increasing schedule of ``n``.

Each backward step decomposes ``y_{k+1}`` by one joint least-squares fit on

    [phi, phi * dW_1, ..., phi * dW_d, phi * dB^H, phi * dM_1, ...],

where ``phi`` is a polynomial basis in the state features times regime
indicators.  The ``phi`` block gives the step-``k`` measurable part (the
conditional expectation when increments are unpredictable) and the increment
blocks give ``z``, ``r`` and ``f``.  Fitting everything jointly accounts for
the correlation of fBm increments with the past and leaves a residual that is
orthogonal to every increment; targets lying in the span are fitted exactly,
so no projection noise accumulates for linear problems.  ``y`` itself gets one
implicit fixed-point pass.

The state ``y`` is scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np

from .drivers import ConditioningError, DriverBundle
from .forward import InequalityReport, ParameterError
from .timegrid import TimeGrid, cell_kernel_weights, weighted_l2k_norm, weighted_sq_integrals

__all__ = [
    "NonConvergenceError",
    "BackwardSpec",
    "BackwardSolution",
    "CauchyReport",
    "truncate_driver",
    "regression_basis",
    "backward_sweep",
    "solve_truncated",
    "solve_infinite",
    "fbm_energy_paths",
    "bsde_estimate_check",
]


class NonConvergenceError(RuntimeError):
    """Truncation levels stopped getting closer to each other."""


@dataclass(frozen=True)
class BackwardSpec:
    """Driver ``g(t, y, z, r, f, i)`` with declared constants.

    Arrays passed to ``g``: ``y, r`` of shape ``(paths,)``, ``z`` of shape
    ``(paths, d)``, ``f`` of shape ``(paths, n_pairs)``, ``i`` the regimes.
    ``affine``, when given, is ``(a_y, a_z, a_r, a_f, c)`` with
    ``g = a_y y + a_z . z + a_r r + a_f . f + c(t, i)``; it is checked on
    random points at construction.
    """

    g: Callable
    K: float = 0.0
    L: float = 0.0
    l_gy: float = 0.0
    l_gz: float = 0.0
    l_gr: float = 0.0
    l_gf: float = 0.0
    affine: tuple | None = None
    d: int = 1
    n_pairs: int = 0
    name: str = "backward"

    def __post_init__(self) -> None:
        if self.affine is not None:
            _check_affine(self)


def _check_affine(spec: BackwardSpec, n: int = 64, seed: int = 12345) -> None:
    a_y, a_z, a_r, a_f, c = spec.affine
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    z = rng.normal(size=(n, spec.d))
    r = rng.normal(size=n)
    f = rng.normal(size=(n, spec.n_pairs))
    i = np.ones(n, dtype=np.int64)
    for t in (0.0, 0.5, 1.7):
        lhs = np.asarray(spec.g(t, y, z, r, f, i), dtype=float)
        rhs = a_y * y + z @ np.broadcast_to(np.atleast_1d(np.asarray(a_z, float)), (spec.d,)) + a_r * r
        if spec.n_pairs:
            rhs = rhs + f @ np.broadcast_to(np.atleast_1d(np.asarray(a_f, float)), (spec.n_pairs,))
        rhs = rhs + np.asarray(c(t, i), dtype=float)
        if not np.allclose(lhs, rhs, atol=1e-10, rtol=0):
            raise ValueError("driver does not match its declared affine decomposition")


@dataclass(frozen=True)
class BackwardSolution:
    grid: TimeGrid
    y: np.ndarray  # (paths, nodes)
    z: np.ndarray  # (paths, nodes, d)
    r: np.ndarray  # (paths, nodes)
    f: np.ndarray  # (paths, nodes, n_pairs)
    n: float
    bundle: DriverBundle


@dataclass(frozen=True)
class CauchyReport:
    levels: list
    distances: list
    converged: bool
    solutions: list = field(default_factory=list, repr=False)


def truncate_driver(g: Callable, n: float) -> Callable:
    """``g_n(t, ...) = g(t, ...)`` for ``t <= n`` and ``0`` afterwards."""

    def g_n(t, y, *args):
        if t <= n:
            return g(t, y, *args)
        return np.zeros_like(np.asarray(y, dtype=float))

    return g_n


def regression_basis(features: np.ndarray, regimes: np.ndarray, m: int, degree: int = 2) -> np.ndarray:
    """Monomials up to ``degree`` in ``features`` (``(paths, nf)``), times regime indicators."""
    P = regimes.shape[0]
    features = np.asarray(features, dtype=float).reshape(P, -1)
    cols = [np.ones(P)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(features.shape[1]), deg):
            cols.append(np.prod(features[:, list(combo)], axis=1))
    mono = np.stack(cols, axis=1)
    if m == 1:
        return mono
    return np.concatenate([mono * (regimes == j)[:, None] for j in range(1, m + 1)], axis=1)


def _lstsq(design: np.ndarray, target: np.ndarray, step: int) -> np.ndarray:
    """Least-squares coefficients with zero columns dropped and the rest rescaled.

    Collinear columns get the minimum-norm solution; only non-finite input is
    treated as a conditioning failure.
    """
    if not np.all(np.isfinite(design)) or not np.all(np.isfinite(target)):
        raise ConditioningError(f"non-finite values in the regression design at step {step}")
    scale = np.sqrt(np.mean(design**2, axis=0))
    keep = scale > 1e-300
    coef = np.zeros(design.shape[1])
    if np.any(keep):
        sol, *_ = np.linalg.lstsq(design[:, keep] / scale[keep], target, rcond=None)
        coef[keep] = sol / scale[keep]
    return coef


def backward_sweep(
    bundle: DriverBundle,
    k_end: int,
    driver: Callable,
    features: np.ndarray | None = None,
    degree: int = 2,
    mart_degree: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backward regression sweep from ``y(k_end) = 0``.

    ``driver(k, t, y, z, r, f, i) -> (paths,)``.  ``features`` has shape
    ``(paths, nodes, nf)``; by default the Brownian and fBm values are used.
    The conditional-expectation block uses monomials up to ``degree``; the
    integrands ``z, r, f`` use the smaller ``mart_degree`` basis, which is
    exact for linear problems and keeps the sparse jump regressions stable.
    ``f_ij`` is fitted on paths sitting in regime ``i`` and set to zero
    elsewhere, where ``dM_ij`` has no jumps.
    Returns ``(y, z, r, f)`` on all nodes (zero after ``k_end``).
    """
    grid = bundle.grid
    P, N, d = bundle.n_paths, grid.n_steps, bundle.d
    npairs = len(bundle.pairs)
    if features is None:
        features = np.concatenate([bundle.w_path, bundle.bh_path[:, :, None]], axis=2)
    features = np.asarray(features, dtype=float)
    if features.ndim == 2:
        features = features[:, :, None]
    y = np.zeros((P, N + 1))
    z = np.zeros((P, N + 1, d))
    r = np.zeros((P, N + 1))
    f = np.zeros((P, N + 1, npairs))
    dW, dB, dM = bundle.w_increments, bundle.bh_increments, bundle.m_increments
    regimes = bundle.regime_path
    dt = grid.dt
    for k in range(k_end - 1, -1, -1):
        t = float(grid.nodes[k])
        ik = regimes[:, k]
        phi = regression_basis(features[:, k], ik, bundle.m, degree)
        y_next = y[:, k + 1]
        if np.ptp(y_next) <= 1e-12 * max(1.0, float(np.max(np.abs(y_next)))):
            # deterministic target: nothing to project
            cond = y_next.copy()
        else:
            psi = regression_basis(features[:, k], ik, bundle.m, mart_degree)
            mono = regression_basis(features[:, k], ik, 1, mart_degree)
            # f_ij only acts while the chain sits in regime i
            home = [(ik == a)[:, None] * mono for a, _ in bundle.pairs]
            blocks = [phi] + [psi * dW[:, k, a, None] for a in range(d)] + [psi * dB[:, k, None]]
            blocks += [home[c] * dM[:, k, c, None] for c in range(npairs)]
            coef = _lstsq(np.concatenate(blocks, axis=1), y_next, k)
            p, q, h = phi.shape[1], psi.shape[1], mono.shape[1]
            cond = phi @ coef[:p]
            for a in range(d):
                z[:, k, a] = psi @ coef[p + a * q : p + (a + 1) * q]
            r[:, k] = psi @ coef[p + d * q : p + (d + 1) * q]
            base = p + (d + 1) * q
            for c in range(npairs):
                f[:, k, c] = home[c] @ coef[base + c * h : base + (c + 1) * h]
        g0 = np.asarray(driver(k, t, cond, z[:, k], r[:, k], f[:, k], ik), dtype=float)
        y1 = cond - g0 * dt
        g1 = np.asarray(driver(k, t, y1, z[:, k], r[:, k], f[:, k], ik), dtype=float)
        y[:, k] = cond - g1 * dt
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
        raise ConditioningError("backward sweep produced non-finite values")
    return y, z, r, f


def solve_truncated(
    spec: BackwardSpec,
    bundle: DriverBundle,
    n: float,
    features: np.ndarray | None = None,
    degree: int = 2,
) -> BackwardSolution:
    """Solve with ``y(n) = 0`` and driver ``g_n``; the solution is zero after ``n``."""
    grid = bundle.grid
    if n > grid.t_end + 1e-12:
        raise ValueError(f"bundle horizon {grid.t_end} is shorter than the truncation level {n}")
    k_end = grid.index_of(n)
    g_n = truncate_driver(spec.g, n)

    def driver(k, t, y, z, r, f, i):
        return g_n(t, y, z, r, f, i)

    y, z, r, f = backward_sweep(bundle, k_end, driver, features, degree)
    return BackwardSolution(grid=grid, y=y, z=z, r=r, f=f, n=float(n), bundle=bundle)


def solve_infinite(
    spec: BackwardSpec,
    bundle_factory,
    tol: float = 1e-3,
    n_schedule=(4.0, 6.0, 8.0),
    features: np.ndarray | None = None,
    degree: int = 2,
) -> tuple[BackwardSolution, CauchyReport]:
    """Solve at increasing truncation levels until consecutive ones are ``tol``-close.

    ``bundle_factory`` is a bundle covering the largest level, or a callable
    ``horizon -> bundle``.  Distances are weighted ``L^{2,K}`` norms of
    ``y_n - y_{n'}`` on the common grid.
    """
    if not spec.K > 0:
        raise ParameterError("the truncation scheme assumes a positive discount K")
    levels = [float(v) for v in n_schedule]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("n_schedule must be increasing")
    bundle = bundle_factory(levels[-1]) if callable(bundle_factory) else bundle_factory
    distances: list[float] = []
    sols: list[BackwardSolution] = []
    converged = False
    for n in levels:
        sol = solve_truncated(spec, bundle, n, features, degree)
        if sols:
            dist = weighted_l2k_norm(sol.y - sols[-1].y, spec.K, bundle.grid)
            distances.append(dist)
            if len(distances) >= 3 and distances[-1] >= distances[-2] >= distances[-3]:
                raise NonConvergenceError(f"distances {distances[-3:]} did not decrease over three levels")
        sols.append(sol)
        if distances and distances[-1] < tol:
            converged = True
            break
    report = CauchyReport(levels=levels[: len(sols)], distances=distances, converged=converged, solutions=sols)
    return sols[-1], report


def fbm_energy_paths(r: np.ndarray, K: float, grid: TimeGrid, H: float) -> float:
    """Ensemble mean of the fractional energy of ``int r dB^H`` with weight ``e^{2Ks}``."""
    r = np.asarray(r, dtype=float)[:, : grid.n_steps]
    if not np.any(r):
        return 0.0
    w = cell_kernel_weights(grid.n_steps, grid.dt, H)
    total = np.zeros(r.shape[0])
    for k in range(grid.n_steps):
        hist = r[:, :k] @ w[k:0:-1] if k > 0 else 0.0
        total += np.exp(2.0 * K * grid.nodes[k]) * (2.0 * r[:, k] * hist + w[0] * r[:, k] ** 2)
    return float(np.mean(total))


def _driver_paths(g: Callable, sol: BackwardSolution, at_zero: bool, ref: BackwardSolution | None = None) -> np.ndarray:
    grid, bundle = sol.grid, sol.bundle
    src = ref if ref is not None else sol
    P = sol.y.shape[0]
    out = np.empty((P, grid.n_nodes))
    for k in range(grid.n_nodes):
        t = float(grid.nodes[k])
        i = bundle.regime_path[:, k]
        if at_zero:
            out[:, k] = g(t, np.zeros(P), np.zeros_like(src.z[:, k]), np.zeros(P), np.zeros_like(src.f[:, k]), i)
        else:
            out[:, k] = g(t, src.y[:, k], src.z[:, k], src.r[:, k], src.f[:, k], i)
    return out


def bsde_estimate_check(
    spec: BackwardSpec,
    sol: BackwardSolution,
    mu: float,
    spec2: BackwardSpec | None = None,
    sol2: BackwardSolution | None = None,
) -> InequalityReport:
    """Evaluate the energy estimate (single mode) or its stability form (two specs).

    Left side: ``E{|y(t0)e^{K t0}|^2 + int [(2K-2L-mu)|y|^2 + (1-2L)|z|^2 + 2L|f|^2 + 2L|r|^2] e^{2Ks} ds}``.
    Right side: ``E int |g(s,0,0,0,0) e^{Ks}|^2 ds / mu + C`` with ``C`` the
    fractional energy of the extracted ``r``; in stability mode
    ``E int |(g - gbar)(s, ybar, zbar, rbar, fbar) e^{Ks}|^2 ds / mu``.
    """
    K, L = spec.K, spec.L
    if not mu > 0:
        raise ParameterError("mu must be positive")
    if not 0.0 < L < min(0.5, K - mu / 2.0):
        raise ParameterError(f"need 0 < L < min(1/2, K - mu/2); got L={L}, K={K}, mu={mu}")
    if (spec2 is None) != (sol2 is None):
        raise ValueError("stability mode needs both the second spec and its solution")
    grid = sol.grid
    if sol2 is None:
        mode = "single"
        dy, dz, dr, df = sol.y, sol.z, sol.r, sol.f
        g_term = _driver_paths(spec.g, sol, at_zero=True)
        C = fbm_energy_paths(sol.r, K, grid, sol.bundle.H)
    else:
        mode = "stability"
        if sol2.bundle is not sol.bundle:
            raise ValueError("stability mode needs both solutions on the same bundle")
        dy, dz, dr, df = sol.y - sol2.y, sol.z - sol2.z, sol.r - sol2.r, sol.f - sol2.f
        g_term = _driver_paths(spec.g, sol, False, ref=sol2) - _driver_paths(spec2.g, sol, False, ref=sol2)
        C = 0.0
    def E(a: np.ndarray) -> float:
        return float(np.mean(weighted_sq_integrals(a, K, grid))) if a.size else 0.0

    init = float(np.mean(dy[:, 0] ** 2)) * np.exp(2.0 * K * grid.t0)
    lhs = init + (2 * K - 2 * L - mu) * E(dy) + (1 - 2 * L) * E(dz) + 2 * L * E(df) + 2 * L * E(dr)
    rhs = E(g_term) / mu + C
    margin = rhs - lhs
    return InequalityReport(
        lhs=float(lhs),
        rhs=float(rhs),
        margin=float(margin),
        passed=bool(margin >= 0.0),
        mode=mode,
        details={"initial": init, "fbm_constant": C},
    )
