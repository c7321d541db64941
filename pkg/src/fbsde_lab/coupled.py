"""Fully coupled forward-backward system solved by continuation in a parameter.

    x(t0) = Psi(y(t0)) + xi,
    dx = b(s, theta) ds + sigma(s, theta) dW + gamma(s) dB^H,
    dy = g(s, theta) ds + z dW + r dB^H + f . dM,

with ``theta = (x, y, z, r, f)``, scalar ``x`` and ``y``.  The family

    Psi^tau = tau Psi,  g^tau = tau g - (1 - tau) kappa_y y,
    b^tau = tau b - (1 - tau) kappa_x x,  sigma^tau = tau sigma,  gamma^tau = tau gamma

joins a decoupled linear system (``tau = 0``) to the target (``tau = 1``).
Writing the level-``tau`` system as "level 0 plus ``tau`` times the nonlinear
part ``N(theta)``" gives the map

    T_{tau0 + delta}(theta) = Solve_{tau0}(forcing + delta N(theta)),

which contracts for small ``delta``.  ``Solve_{tau0}`` itself is the fixed
point ``Theta = S0(forcing + tau0 N(Theta))`` of the affine level-0 solver
``S0`` and is found by Anderson mixing, warm-started from the current iterate.

The backward equation is truncated at the bundle horizon (``y(T) = 0``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgWarning
from scipy.optimize import NoConvergence, anderson

from .backward import backward_sweep
from .drivers import DriverBundle
from .forward import InequalityReport, ParameterError
from .timegrid import TimeGrid, weighted_sq_integrals

__all__ = [
    "DivergenceError",
    "ContinuationError",
    "FBSDESpec",
    "ThetaProcess",
    "Forcing",
    "ContinuationTrace",
    "StepReport",
    "build_tau_family",
    "zero_forcing",
    "theta_distance",
    "solve_tau0",
    "continuation_step",
    "solve_fbsde",
    "fixed_point_residual",
    "coupled_stability_check",
    "fit_stability_constant",
]

class DivergenceError(RuntimeError):
    """The continuation map did not contract; try a smaller step."""


class ContinuationError(RuntimeError):
    """The continuation step size fell below its floor; ``trace`` holds the history."""

    def __init__(self, message: str, trace: "ContinuationTrace | None" = None):
        super().__init__(message)
        self.trace = trace


def _zero_psi(y, i):
    return np.zeros_like(np.asarray(y, dtype=float))


def _zero_coef(t, x, y, z, r, f, i):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class FBSDESpec:
    """Coefficients of the coupled system.

    ``psi(y, i)``; ``b, g, sigma`` are called as ``fn(t, x, y, z, r, f, i)``
    with ``x, y, r, i`` of shape ``(paths,)``, ``z`` ``(paths, d)`` and ``f``
    ``(paths, n_pairs)``; ``b, g`` return ``(paths,)`` and ``sigma`` returns
    ``(paths, d)`` (or ``(paths,)`` when ``d = 1``).  ``gamma(t)`` is a float.
    ``lipschitz`` is an informational table ``{(coef, var): constant}``.
    """

    psi: Callable = _zero_psi
    g: Callable = _zero_coef
    b: Callable = _zero_coef
    sigma: Callable = _zero_coef
    gamma: Callable = lambda t: 0.0  # noqa: E731
    kappa_x: float = 1.0
    kappa_y: float = -1.0
    K: float = 0.0
    lipschitz: dict = field(default_factory=dict)
    name: str = "fbsde"

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(np.asarray(self.psi(np.zeros(1), np.ones(1, dtype=np.int64)), dtype=float))):
            raise ParameterError("Psi(0) must be finite")

    def k_conditions(self) -> dict:
        """Which discount conditions this spec satisfies (informational)."""
        return {
            "monotone_order": bool(self.kappa_x > self.kappa_y),
            "K_between_kappas": bool(self.kappa_y < self.K < self.kappa_x),
            "K_positive": bool(self.K > 0),
        }


@dataclass(frozen=True)
class ThetaProcess:
    """Paths of ``(x, y, z, r, f)`` on a grid."""

    grid: TimeGrid
    x: np.ndarray  # (paths, nodes)
    y: np.ndarray  # (paths, nodes)
    z: np.ndarray  # (paths, nodes, d)
    r: np.ndarray  # (paths, nodes)
    f: np.ndarray  # (paths, nodes, n_pairs)

    @property
    def shapes(self) -> list:
        return [a.shape for a in (self.x, self.y, self.z, self.r, self.f)]

    def pack(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.x, self.y, self.z, self.r, self.f)])

    def unpack(self, v: np.ndarray) -> "ThetaProcess":
        parts, pos = [], 0
        for shp in self.shapes:
            n = int(np.prod(shp))
            parts.append(np.asarray(v[pos : pos + n]).reshape(shp))
            pos += n
        return ThetaProcess(self.grid, *parts)

    @classmethod
    def zeros(cls, bundle: DriverBundle) -> "ThetaProcess":
        P, M = bundle.n_paths, bundle.grid.n_nodes
        return cls(bundle.grid, np.zeros((P, M)), np.zeros((P, M)), np.zeros((P, M, bundle.d)),
                   np.zeros((P, M)), np.zeros((P, M, len(bundle.pairs))))


@dataclass(frozen=True)
class Forcing:
    """Additive data of the level-0 system.

    ``xi (paths,)`` initial shift; ``phi, psi (paths, nodes)`` backward and
    forward drifts; ``eta (paths, nodes, d)`` extra diffusion; ``zeta (nodes,)``
    the coefficient of ``dB^H``.
    """

    xi: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray

    def __add__(self, other: "Forcing") -> "Forcing":
        return Forcing(*(a + b for a, b in zip(self._parts(), other._parts())))

    def scale(self, c: float) -> "Forcing":
        return Forcing(*(c * a for a in self._parts()))

    def _parts(self):
        return (self.xi, self.phi, self.psi, self.eta, self.zeta)


def zero_forcing(bundle: DriverBundle) -> Forcing:
    P, M = bundle.n_paths, bundle.grid.n_nodes
    return Forcing(np.zeros(P), np.zeros((P, M)), np.zeros((P, M)), np.zeros((P, M, bundle.d)), np.zeros(M))


@dataclass(frozen=True)
class StepReport:
    tau: float
    delta: float
    iterations: int
    distance: float
    c5: float
    distances: list = field(default_factory=list)


@dataclass
class ContinuationTrace:
    """History of the continuation march."""

    steps: list = field(default_factory=list)  # StepReport entries
    delta: float = 0.0
    delta0: list = field(default_factory=list)  # measured 1/(2 sqrt(C5)) per step
    theta: ThetaProcess | None = None
    final_residual: float = float("nan")
    k_conditions: dict = field(default_factory=dict)

    @property
    def taus(self) -> list:
        return [s.tau for s in self.steps]

    def to_dict(self) -> dict:
        """Plain-Python view; non-finite numbers become ``None`` so the result is valid JSON."""
        return {
            "steps": [
                {
                    "tau": _num(s.tau),
                    "delta": _num(s.delta),
                    "iterations": int(s.iterations),
                    "distance": _num(s.distance),
                    "c5": _num(s.c5),
                }
                for s in self.steps
            ],
            "delta": _num(self.delta),
            "delta0": [_num(v) for v in self.delta0],
            "final_residual": _num(self.final_residual),
            "k_conditions": {k: (_num(v) if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) else v)
                             for k, v in self.k_conditions.items()},
        }


def _num(v) -> float | None:
    v = float(v)
    return v if np.isfinite(v) else None


def build_tau_family(spec: FBSDESpec, tau: float) -> FBSDESpec:
    """The interpolated spec at level ``tau`` (``gamma^tau = tau gamma``)."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    kx, ky = spec.kappa_x, spec.kappa_y
    s = spec

    def psi(y, i):
        return tau * np.asarray(s.psi(y, i), dtype=float)

    def g(t, x, y, z, r, f, i):
        return tau * np.asarray(s.g(t, x, y, z, r, f, i), dtype=float) - (1.0 - tau) * ky * np.asarray(y, float)

    def b(t, x, y, z, r, f, i):
        return tau * np.asarray(s.b(t, x, y, z, r, f, i), dtype=float) - (1.0 - tau) * kx * np.asarray(x, float)

    def sigma(t, x, y, z, r, f, i):
        return tau * np.asarray(s.sigma(t, x, y, z, r, f, i), dtype=float)

    def gamma(t):
        return tau * float(s.gamma(t))

    return replace(spec, psi=psi, g=g, b=b, sigma=sigma, gamma=gamma, name=f"{spec.name}@tau={tau:g}")


def theta_distance(a: ThetaProcess, b: ThetaProcess, K: float) -> float:
    """``{E|dy(t0)|^2 e^{2K t0} + sum over components of E int |d. e^{Ks}|^2 ds}^{1/2}``."""
    grid = a.grid
    total = float(np.mean((a.y[:, 0] - b.y[:, 0]) ** 2)) * np.exp(2.0 * K * grid.t0)
    for u, v in zip((a.x, a.y, a.z, a.r, a.f), (b.x, b.y, b.z, b.r, b.f)):
        if u.size:
            total += float(np.mean(weighted_sq_integrals(u - v, K, grid)))
    return float(np.sqrt(total))


def _check_admissible(spec: FBSDESpec) -> None:
    if not spec.kappa_x > spec.kappa_y:
        raise ParameterError(f"need kappa_x > kappa_y, got {spec.kappa_x} <= {spec.kappa_y}")
    if not spec.kappa_y < spec.K < spec.kappa_x:
        raise ParameterError(f"need K in (kappa_y, kappa_x) = ({spec.kappa_y}, {spec.kappa_x}), got {spec.K}")


def _level0(spec: FBSDESpec, forcing: Forcing, bundle: DriverBundle, degree: int) -> ThetaProcess:
    """Decoupled linear pair with the given forcing (affine in the forcing)."""
    grid = bundle.grid
    P, N, dt = bundle.n_paths, grid.n_steps, grid.dt
    kx, ky = spec.kappa_x, spec.kappa_y
    dW, dB = bundle.w_increments, bundle.bh_increments
    x = np.empty((P, N + 1))
    x[:, 0] = forcing.xi
    for k in range(N):
        x[:, k + 1] = (
            x[:, k]
            + (-kx * x[:, k] + forcing.psi[:, k]) * dt
            + np.einsum("pd,pd->p", forcing.eta[:, k], dW[:, k])
            + forcing.zeta[k] * dB[:, k]
        )
    phi = forcing.phi

    def driver(k, t, y, z, r, f, i):
        return -ky * y + phi[:, k]

    features = np.stack([x, bundle.bh_path], axis=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        y, z, r, f = backward_sweep(bundle, N, driver, features, degree)
    return ThetaProcess(grid, x, y, z, r, f)


def _nonlinear_part(spec: FBSDESpec, theta: ThetaProcess, bundle: DriverBundle) -> Forcing:
    """``N(theta)``: the part of the level-``tau`` data that is multiplied by ``tau``."""
    grid = bundle.grid
    P, M, d = bundle.n_paths, grid.n_nodes, bundle.d
    kx, ky = spec.kappa_x, spec.kappa_y
    reg = bundle.regime_path
    phi = np.empty((P, M))
    psi = np.empty((P, M))
    eta = np.empty((P, M, d))
    for k in range(M):
        t = float(grid.nodes[k])
        args = (t, theta.x[:, k], theta.y[:, k], theta.z[:, k], theta.r[:, k], theta.f[:, k], reg[:, k])
        phi[:, k] = np.asarray(spec.g(*args), dtype=float) + ky * theta.y[:, k]
        psi[:, k] = np.asarray(spec.b(*args), dtype=float) + kx * theta.x[:, k]
        eta[:, k] = np.asarray(spec.sigma(*args), dtype=float).reshape(P, d)
    xi = np.asarray(spec.psi(theta.y[:, 0], reg[:, 0]), dtype=float).reshape(P)
    zeta = np.array([float(spec.gamma(float(t))) for t in grid.nodes])
    return Forcing(xi, phi, psi, eta, zeta)


def solve_tau0(
    spec: FBSDESpec, forcing: Forcing | None, bundle: DriverBundle, degree: int = 2
) -> ThetaProcess:
    """Solve the decoupled linear system: ``dx = (-kappa_x x + psi) ds + eta dW + zeta dB^H``,
    ``x(t0) = xi``; ``dy = (-kappa_y y + phi) ds + z dW + r dB^H + f . dM``, ``y(T) = 0``."""
    _check_admissible(spec)
    return _level0(spec, zero_forcing(bundle) if forcing is None else forcing, bundle, degree)


def _solve_level(
    spec: FBSDESpec,
    tau0: float,
    forcing: Forcing,
    bundle: DriverBundle,
    start: ThetaProcess,
    tol: float,
    degree: int,
    maxiter: int = 60,
) -> ThetaProcess:
    """``Solve_{tau0}(forcing)``: fixed point of ``Theta = S0(forcing + tau0 N(Theta))``."""
    if tau0 == 0.0:
        return _level0(spec, forcing, bundle, degree)

    def residual(v):
        th = start.unpack(v)
        return _level0(spec, forcing + _nonlinear_part(spec, th, bundle).scale(tau0), bundle, degree).pack() - v

    v0 = start.pack()
    if np.max(np.abs(residual(v0))) <= tol:
        return _level0(spec, forcing + _nonlinear_part(spec, start, bundle).scale(tau0), bundle, degree)
    try:
        v = anderson(residual, v0, alpha=1.0, M=10, f_tol=tol, maxiter=maxiter, line_search=None)
    except (NoConvergence, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise DivergenceError(f"level tau={tau0:g} fixed point did not converge: {exc}") from exc
    th = start.unpack(v)
    return _level0(spec, forcing + _nonlinear_part(spec, th, bundle).scale(tau0), bundle, degree)


def _map(spec, tau0, delta, theta, forcing, bundle, start, tol, degree):
    shifted = forcing + _nonlinear_part(spec, theta, bundle).scale(delta) if delta else forcing
    return _solve_level(spec, tau0, shifted, bundle, start, tol, degree)


def continuation_step(
    spec: FBSDESpec,
    tau0: float,
    delta: float,
    prior: ThetaProcess,
    bundle: DriverBundle,
    tol: float = 1e-3,
    max_iter: int = 50,
    forcing: Forcing | None = None,
    degree: int = 2,
) -> tuple[ThetaProcess, StepReport]:
    """Iterate ``T_{tau0 + delta}`` from ``prior`` until successive iterates are ``tol``-close.

    The reported ``c5`` is the largest ``(distance ratio)^2 / delta^2`` seen.
    """
    if delta < 0 or tau0 + delta > 1.0 + 1e-12:
        raise ParameterError(f"need 0 <= delta and tau0 + delta <= 1, got tau0={tau0}, delta={delta}")
    forcing = zero_forcing(bundle) if forcing is None else forcing
    if delta == 0.0:
        return prior, StepReport(tau=tau0, delta=0.0, iterations=1, distance=0.0, c5=0.0)
    K = spec.K
    inner_tol = tol * 1e-2
    theta = prior
    distances: list[float] = []
    c5 = 0.0
    rising = 0
    for it in range(1, max_iter + 1):
        new = _map(spec, tau0, delta, theta, forcing, bundle, theta, inner_tol, degree)
        dist = theta_distance(new, theta, K)
        if not np.isfinite(dist):
            raise DivergenceError(f"non-finite iterate at tau={tau0 + delta:g}; use a smaller delta")
        if distances and distances[-1] > 0:
            ratio = dist / distances[-1]
            c5 = max(c5, ratio**2 / delta**2)
            rising = rising + 1 if ratio >= 1.0 else 0
            if rising >= 3:
                raise DivergenceError(f"distance ratio >= 1 for 3 iterations at tau={tau0 + delta:g}; use a smaller delta")
        distances.append(dist)
        theta = new
        if dist < tol:
            return theta, StepReport(tau=min(1.0, tau0 + delta), delta=delta, iterations=it, distance=dist,
                                     c5=c5, distances=distances)
    raise DivergenceError(f"no convergence in {max_iter} iterations at tau={tau0 + delta:g}; use a smaller delta")


def _probe_c5(spec, tau0, delta, theta, forcing, bundle, tol, degree) -> float:
    """``C5`` from the probe pair ``(theta, T theta)``: ``(|T^2 theta - T theta| / |T theta - theta|)^2 / delta^2``."""
    t1 = _map(spec, tau0, delta, theta, forcing, bundle, theta, tol, degree)
    t2 = _map(spec, tau0, delta, t1, forcing, bundle, t1, tol, degree)
    den = theta_distance(t1, theta, spec.K)
    if den < 1e-12:  # theta is already a fixed point up to round-off
        return 0.0
    return float((theta_distance(t2, t1, spec.K) / den) ** 2 / delta**2)


def fixed_point_residual(
    spec: FBSDESpec, theta: ThetaProcess, bundle: DriverBundle, forcing: Forcing | None = None, degree: int = 2
) -> float:
    """Distance between ``theta`` and one full sweep of the target system with ``theta`` plugged in."""
    forcing = zero_forcing(bundle) if forcing is None else forcing
    swept = _level0(spec, forcing + _nonlinear_part(spec, theta, bundle), bundle, degree)
    return theta_distance(swept, theta, spec.K)


def solve_fbsde(
    spec: FBSDESpec,
    bundle: DriverBundle,
    tol: float = 1e-3,
    forcing: Forcing | None = None,
    max_iter: int = 50,
    min_delta: float = 1e-4,
    degree: int = 2,
) -> tuple[ThetaProcess, ContinuationTrace]:
    """March ``tau`` from 0 to 1 with steps ``delta <= 1/(2 sqrt(C5))`` measured at each level.

    ``C5`` is probed with the remaining distance to 1, halved while the probe
    itself diverges.  A step that fails to contract is retried with half the
    size; a step size below ``min_delta`` raises :class:`ContinuationError`.
    """
    _check_admissible(spec)
    forcing = zero_forcing(bundle) if forcing is None else forcing
    trace = ContinuationTrace(k_conditions=spec.k_conditions())
    theta = _level0(spec, forcing, bundle, degree)
    trace.steps.append(StepReport(tau=0.0, delta=0.0, iterations=1, distance=0.0, c5=0.0))
    tau = 0.0
    inner_tol = tol * 1e-2
    while tau < 1.0:
        remaining = 1.0 - tau
        probe = remaining
        while True:  # a probe step too large to contract says nothing about C5; shrink it
            try:
                c5 = _probe_c5(spec, tau, probe, theta, forcing, bundle, inner_tol, degree)
                break
            except DivergenceError:
                probe *= 0.5
                if probe < min_delta:
                    c5 = float("inf")
                    break
        delta0 = 1.0 / (2.0 * np.sqrt(c5)) if c5 > 0 else float("inf")
        trace.delta0.append(float(delta0))
        delta = min(remaining, delta0)
        while True:
            if delta < min_delta:
                trace.theta = theta
                raise ContinuationError(f"step size {delta:.3g} fell below {min_delta:g} at tau={tau:g}", trace)
            try:
                new, rep = continuation_step(spec, tau, delta, theta, bundle, tol, max_iter, forcing, degree)
                break
            except DivergenceError:
                delta *= 0.5
        theta = new
        tau = 1.0 if delta >= remaining else tau + delta
        trace.steps.append(replace(rep, tau=tau))
        trace.delta = delta
    trace.theta = theta
    trace.final_residual = fixed_point_residual(spec, theta, bundle, forcing, degree)
    return theta, trace


def _input_size(spec, spec_bar, theta_bar, bundle) -> float:
    """``E|dxi e^{K t0}|^2 + E int |(Gamma - Gammabar)(theta_bar) e^{Ks}|^2 ds``."""
    K, grid = spec.K, bundle.grid
    a = _nonlinear_part(spec, theta_bar, bundle)
    b = _nonlinear_part(spec_bar, theta_bar, bundle)
    total = float(np.mean((a.xi - b.xi) ** 2)) * np.exp(2.0 * K * grid.t0)
    for u, v in ((a.phi, b.phi), (a.psi, b.psi), (a.eta, b.eta)):
        total += float(np.mean(weighted_sq_integrals(u - v, K, grid)))
    dz = (a.zeta - b.zeta)[None, :]
    total += float(np.mean(weighted_sq_integrals(dz, K, grid)))
    return total


def coupled_stability_check(
    spec: FBSDESpec,
    spec_bar: FBSDESpec,
    theta: ThetaProcess,
    theta_bar: ThetaProcess,
    bundle: DriverBundle,
    C: float | None = None,
) -> InequalityReport:
    """Both sides of the stability estimate ``|theta - theta_bar|^2 <= C * input``.

    With ``C=None`` the report carries the smallest admissible constant
    ``lhs / input`` in ``details['ratio']`` and passes trivially.
    """
    lhs = theta_distance(theta, theta_bar, spec.K) ** 2
    size = _input_size(spec, spec_bar, theta_bar, bundle)
    ratio = lhs / size if size > 0 else (0.0 if lhs == 0 else float("inf"))
    c = ratio if C is None else float(C)
    rhs = c * size
    return InequalityReport(
        lhs=float(lhs),
        rhs=float(rhs),
        margin=float(rhs - lhs),
        passed=bool(rhs - lhs >= -1e-12 * max(1.0, lhs)),
        mode="stability",
        details={"input": size, "ratio": ratio},
    )


def fit_stability_constant(reports: list) -> tuple[float, list]:
    """Smallest ``C`` covering a library of stability reports, and the margins it leaves."""
    c_hat = max(r.details["ratio"] for r in reports) if reports else 0.0
    margins = [c_hat * r.details["input"] - r.lhs for r in reports]
    return float(c_hat), margins
