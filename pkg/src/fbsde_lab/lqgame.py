"""Two-player zero-sum linear-quadratic game with regime switching and fBm noise.

State and cost::

    dx = (A x + B1 u1 + B2 u2) ds + (C x + D1 u1 + D2 u2) dW + Gamma_fbm(s) dB^H,
    J  = 1/2 E int e^{2Ks} <Pi (x, u1, u2), (x, u1, u2)> ds,
    Pi = [[Q, S1^T, S2^T], [S1, R11, R12], [S2, R21, R22]].

Player 1 minimises and player 2 maximises.  The saddle point is
characterised by the adjoint equation

    dy = -[(2K + A)^T y + C^T z + Q x + S^T u] ds + z dW + r dB^H + f . dM

together with the stationarity condition ``B^T y + D^T z + S x + R u = 0``.
Substituting ``u = -R^{-1}(B^T y + D^T z + S x)`` gives a coupled linear
forward-backward system that is handed to :mod:`fbsde_lab.coupled`.

The consistency checks accept matrix-valued coefficients; the solver itself
handles a scalar state, scalar controls and one Brownian motion.  The
fBm coefficient is called ``gamma_fbm`` to keep ``H`` for the Hurst index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .coupled import FBSDESpec, Forcing, ThetaProcess, solve_fbsde, zero_forcing
from .drivers import ConditioningError, DriverBundle, path_rng, validate_generator
from .timegrid import validate_hurst, weighted_l2k_norm

__all__ = [
    "InadmissibleKError",
    "AssemblyError",
    "AssumptionError",
    "LQProblem",
    "CostReport",
    "GameSolution",
    "AssumptionReport",
    "SaddleReport",
    "ControlMap",
    "make_problem",
    "compute_kappa_x",
    "admissible_k_bound",
    "check_assumption_d",
    "evaluate_cost",
    "assemble_coupled_system",
    "solve_game",
    "stationarity_residual",
    "optimal_controls",
    "saddle_check",
    "cross_term_reduce",
]

_TAG_SADDLE = 21
_MATRICES = ("A", "B1", "B2", "C", "D1", "D2", "Q", "S1", "S2", "R11", "R12", "R22")


class InadmissibleKError(ValueError):
    """The discount exponent is not below the admissible bound."""


class AssemblyError(ValueError):
    """The control weight ``R`` is singular somewhere on the probe set."""


class AssumptionError(ValueError):
    """The zero-sum sign pattern on the weights does not hold."""


def _as_coef(value, m: int) -> Callable:
    """Wrap a constant, a per-regime list or a callable ``(t, i)`` as ``(t, i) -> 2-d array``."""
    if callable(value):
        return lambda t, i: np.atleast_2d(np.asarray(value(t, i), dtype=float))
    if isinstance(value, dict):
        table = {int(k): np.atleast_2d(np.asarray(v, dtype=float)) for k, v in value.items()}
        return lambda t, i: table[int(i)]
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == m and m > 1:
        table = {j + 1: np.atleast_2d(arr[j]) for j in range(m)}
        return lambda t, i: table[int(i)]
    const = np.atleast_2d(arr)
    return lambda t, i: const


@dataclass(frozen=True)
class LQProblem:
    """Coefficients ``(t, regime) -> 2-d array`` and problem data.

    Use :func:`make_problem` to build one from constants or per-regime lists.
    """

    A: Callable
    B1: Callable
    B2: Callable
    C: Callable
    D1: Callable
    D2: Callable
    Q: Callable
    S1: Callable
    S2: Callable
    R11: Callable
    R12: Callable
    R22: Callable
    gamma_fbm: Callable
    K: float
    x0: float = 1.0
    t0: float = 0.0
    i_start: int = 1
    q: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    H: float = 0.75
    name: str = "lq"

    def __post_init__(self) -> None:
        validate_hurst(self.H)
        object.__setattr__(self, "q", validate_generator(self.q))

    @property
    def m(self) -> int:
        return self.q.shape[0]

    def R21(self, t, i) -> np.ndarray:
        return self.R12(t, i).T

    def blocks(self, t: float, i: int) -> dict:
        """Stacked ``B = (B1, B2)``, ``D = (D1, D2)``, ``S = (S1; S2)`` and the block ``R``."""
        out = {name: getattr(self, name)(t, i) for name in _MATRICES}
        out["B"] = np.hstack([out["B1"], out["B2"]])
        out["D"] = np.hstack([out["D1"], out["D2"]])
        out["S"] = np.vstack([out["S1"], out["S2"]])
        out["R"] = np.block([[out["R11"], out["R12"]], [out["R12"].T, out["R22"]]])
        return out

    def probe_points(self, times) -> list:
        return [(float(t), j) for t in times for j in range(1, self.m + 1)]


def make_problem(
    *,
    A=0.0,
    B1=0.0,
    B2=0.0,
    C=0.0,
    D1=0.0,
    D2=0.0,
    Q=0.0,
    S1=0.0,
    S2=0.0,
    R11=1.0,
    R12=0.0,
    R22=-1.0,
    gamma_fbm=0.0,
    K=0.0,
    x0=1.0,
    t0=0.0,
    i_start=1,
    q=None,
    H=0.75,
    name="lq",
) -> LQProblem:
    """Build an :class:`LQProblem`; each coefficient may be a constant, a
    per-regime list, a ``{regime: value}`` dict or a callable ``(t, i)``."""
    q = np.zeros((1, 1)) if q is None else np.asarray(q, dtype=float)
    m = q.shape[0]
    coefs = {k: _as_coef(v, m) for k, v in dict(A=A, B1=B1, B2=B2, C=C, D1=D1, D2=D2, Q=Q, S1=S1, S2=S2,
                                                   R11=R11, R12=R12, R22=R22).items()}
    g = gamma_fbm if callable(gamma_fbm) else (lambda t, _c=float(gamma_fbm): _c)
    return LQProblem(**coefs, gamma_fbm=g, K=float(K), x0=float(x0), t0=float(t0), i_start=int(i_start),
                     q=q, H=float(H), name=name)


def _probe_times(prob: LQProblem, probes) -> np.ndarray:
    if probes is None:
        return np.linspace(prob.t0, prob.t0 + 10.0, 21)
    probes = np.atleast_1d(np.asarray(probes, dtype=float))
    if probes.size == 0:
        raise ValueError("probe set must be non-empty")
    return probes


def compute_kappa_x(prob: LQProblem, probes=None) -> float:
    """``-1/2`` times the largest eigenvalue of ``A + A^T`` over the probe set and all regimes."""
    worst = -np.inf
    for t, j in prob.probe_points(_probe_times(prob, probes)):
        a = prob.A(t, j)
        try:
            lam = np.linalg.eigvalsh(a + a.T)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"eigensolve failed at t={t}, regime {j}") from exc
        worst = max(worst, float(lam[-1]))
    return -0.5 * worst


def admissible_k_bound(prob: LQProblem, kappa_x: float, probes=None) -> float:
    """``kappa_x - max ||C||^2 / 2``; raises :class:`InadmissibleKError` if ``prob.K`` is not below it."""
    c_max = max(float(np.linalg.norm(prob.C(t, j), 2)) for t, j in prob.probe_points(_probe_times(prob, probes)))
    k_max = kappa_x - 0.5 * c_max**2
    if not prob.K < k_max:
        raise InadmissibleKError(f"K={prob.K} is not below the admissible bound {k_max}")
    return float(k_max)


@dataclass(frozen=True)
class AssumptionReport:
    zero_sum_pattern: bool
    literal_R_pos: bool
    details: list


def check_assumption_d(prob: LQProblem, probes=None, tol: float = 1e-12) -> AssumptionReport:
    """Check the zero-sum sign pattern and, separately, the literal ``R > 0``.

    Pattern: ``R11 > 0``, ``R22 < 0``, ``R`` invertible,
    ``[[Q, S1^T], [S1, R11]] >= 0`` and ``[[Q, S2^T], [S2, R22]] <= 0``.
    """
    pattern, literal = True, True
    details = []
    for t, j in prob.probe_points(_probe_times(prob, probes)):
        blk = prob.blocks(t, j)
        Q, S1, S2, R11, R22, R = blk["Q"], blk["S1"], blk["S2"], blk["R11"], blk["R22"], blk["R"]
        first = np.block([[Q, S1.T], [S1, R11]])
        second = np.block([[Q, S2.T], [S2, R22]])
        checks = {
            "R11_pos": bool(np.linalg.eigvalsh(R11)[0] > tol),
            "R22_neg": bool(np.linalg.eigvalsh(R22)[-1] < -tol),
            "R_invertible": bool(np.linalg.cond(R) < 1e12),
            "first_block_psd": bool(np.linalg.eigvalsh(first)[0] >= -tol),
            "second_block_nsd": bool(np.linalg.eigvalsh(second)[-1] <= tol),
        }
        lit = bool(np.linalg.eigvalsh(0.5 * (R + R.T))[0] > tol)
        ok = all(checks.values())
        if not ok:
            details.append({"t": t, "regime": j, **checks})
        pattern &= ok
        literal &= lit
    return AssumptionReport(zero_sum_pattern=bool(pattern), literal_R_pos=bool(literal), details=details)


def _regime_table(fn: Callable, t: float, m: int) -> np.ndarray:
    return np.array([float(np.asarray(fn(t, j)).reshape(-1)[0]) for j in range(1, m + 1)])


def _along(fn: Callable, t: float, regimes: np.ndarray, m: int) -> np.ndarray:
    """Scalar coefficient evaluated at every path's current regime."""
    return _regime_table(fn, t, m)[regimes - 1]


def _require_scalar(prob: LQProblem) -> None:
    blk = prob.blocks(prob.t0, 1)
    if any(blk[k].shape != (1, 1) for k in _MATRICES):
        raise NotImplementedError("the game solver handles scalar state, scalar controls and d = 1")


@dataclass(frozen=True)
class CostReport:
    """``J`` on the truncation window, its MC standard error and the state path."""

    J: float
    se: float
    per_path: np.ndarray
    x: np.ndarray
    tail_bound: float | None


def simulate_state(prob: LQProblem, u1: np.ndarray, u2: np.ndarray, bundle: DriverBundle) -> np.ndarray:
    """Euler scheme for the state under open-loop controls given on the nodes."""
    _require_scalar(prob)
    grid = bundle.grid
    P, N, dt, m = bundle.n_paths, grid.n_steps, grid.dt, prob.m
    reg = bundle.regime_path
    dW, dB = bundle.w_increments[:, :, 0], bundle.bh_increments
    u1 = np.broadcast_to(np.asarray(u1, dtype=float), (P, N + 1))
    u2 = np.broadcast_to(np.asarray(u2, dtype=float), (P, N + 1))
    x = np.empty((P, N + 1))
    x[:, 0] = prob.x0
    for k in range(N):
        t = float(grid.nodes[k])
        ik = reg[:, k]
        c = {n: _along(getattr(prob, n), t, ik, m) for n in ("A", "B1", "B2", "C", "D1", "D2")}
        drift = c["A"] * x[:, k] + c["B1"] * u1[:, k] + c["B2"] * u2[:, k]
        diff = c["C"] * x[:, k] + c["D1"] * u1[:, k] + c["D2"] * u2[:, k]
        x[:, k + 1] = x[:, k] + drift * dt + diff * dW[:, k] + float(prob.gamma_fbm(t)) * dB[:, k]
    return x


def _running_cost(prob: LQProblem, x, u1, u2, bundle: DriverBundle) -> np.ndarray:
    """``<Pi (x, u1, u2), (x, u1, u2)>`` at every node, ``(paths, nodes)``."""
    grid, m = bundle.grid, prob.m
    reg = bundle.regime_path
    out = np.empty_like(x)
    for k in range(grid.n_nodes):
        t = float(grid.nodes[k])
        ik = reg[:, k]
        c = {n: _along(getattr(prob, n), t, ik, m) for n in ("Q", "S1", "S2", "R11", "R12", "R22")}
        out[:, k] = (
            c["Q"] * x[:, k] ** 2
            + 2.0 * x[:, k] * (c["S1"] * u1[:, k] + c["S2"] * u2[:, k])
            + c["R11"] * u1[:, k] ** 2
            + 2.0 * c["R12"] * u1[:, k] * u2[:, k]
            + c["R22"] * u2[:, k] ** 2
        )
    return out


def _discounted_integral(values: np.ndarray, K: float, bundle: DriverBundle) -> np.ndarray:
    grid = bundle.grid
    return trapezoid(values * np.exp(2.0 * K * grid.nodes)[None, :], dx=grid.dt, axis=1)


def evaluate_cost(prob: LQProblem, u1, u2, bundle: DriverBundle, x: np.ndarray | None = None) -> CostReport:
    """Simulate the state under ``(u1, u2)`` and integrate the discounted quadratic cost."""
    P, M = bundle.n_paths, bundle.grid.n_nodes
    u1 = np.broadcast_to(np.asarray(u1, dtype=float), (P, M))
    u2 = np.broadcast_to(np.asarray(u2, dtype=float), (P, M))
    if x is None:
        x = simulate_state(prob, u1, u2, bundle)
    run = _running_cost(prob, x, u1, u2, bundle)
    per_path = 0.5 * _discounted_integral(run, prob.K, bundle)
    se = float(np.std(per_path, ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    tail = None
    if prob.K < 0:
        tail = float(0.5 * abs(np.mean(run[:, -1])) * np.exp(2.0 * prob.K * bundle.grid.t_end) / (2.0 * abs(prob.K)))
    return CostReport(J=float(np.mean(per_path)), se=se, per_path=per_path, x=x, tail_bound=tail)


def _hamiltonian_table(prob: LQProblem, t: float) -> dict:
    """Per-regime scalar coefficients of the coupled Hamiltonian system at time ``t``."""
    rows = []
    for j in range(1, prob.m + 1):
        blk = prob.blocks(t, j)
        B, D, S, R = blk["B"], blk["D"], blk["S"], blk["R"]
        try:
            Ri = np.linalg.inv(R)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"R is singular at t={t}, regime {j}") from exc
        if np.linalg.cond(R) > 1e12:
            raise AssemblyError(f"R is singular at t={t}, regime {j}")
        rows.append(
            {
                "At": float((blk["A"] - B @ Ri @ S)[0, 0]),
                "BRB": float((B @ Ri @ B.T)[0, 0]),
                "BRD": float((B @ Ri @ D.T)[0, 0]),
                "Ct": float((blk["C"] - D @ Ri @ S)[0, 0]),
                "DRB": float((D @ Ri @ B.T)[0, 0]),
                "DRD": float((D @ Ri @ D.T)[0, 0]),
                "Qt": float((blk["Q"] - S.T @ Ri @ S)[0, 0]),
            }
        )
    return {k: np.array([r[k] for r in rows]) for k in rows[0]}


def assemble_coupled_system(prob: LQProblem, probes=None) -> FBSDESpec:
    """The coupled forward-backward system obtained by substituting the stationary control.

    Forward drift ``(A - B R^{-1} S) x - B R^{-1} B^T y - B R^{-1} D^T z``, diffusion
    ``(C - D R^{-1} S) x - D R^{-1} B^T y - D R^{-1} D^T z`` and backward driver
    ``-[(2K + A - B R^{-1} S) y + (C - D R^{-1} S) z + (Q - S^T R^{-1} S) x]``.
    The level-0 constants are ``kappa_x = -max A~`` and ``kappa_y = 2K + max A~``.
    """
    _require_scalar(prob)
    times = _probe_times(prob, probes)
    At_max = max(float(np.max(_hamiltonian_table(prob, float(t))["At"])) for t in times)
    K = prob.K
    cache: dict = {}

    def table(t):
        if t not in cache:
            cache[t] = _hamiltonian_table(prob, t)
        return cache[t]

    def b(t, x, y, z, r, f, i):
        h = table(t)
        return h["At"][i - 1] * x - h["BRB"][i - 1] * y - h["BRD"][i - 1] * z[:, 0]

    def sigma(t, x, y, z, r, f, i):
        h = table(t)
        return (h["Ct"][i - 1] * x - h["DRB"][i - 1] * y - h["DRD"][i - 1] * z[:, 0])[:, None]

    def g(t, x, y, z, r, f, i):
        h = table(t)
        return -((2.0 * K + h["At"][i - 1]) * y + h["Ct"][i - 1] * z[:, 0] + h["Qt"][i - 1] * x)

    return FBSDESpec(
        g=g,
        b=b,
        sigma=sigma,
        gamma=lambda t: float(prob.gamma_fbm(t)),
        kappa_x=-At_max,
        kappa_y=2.0 * K + At_max,
        K=K,
        name=f"{prob.name}-hamiltonian",
    )


def _stationarity_paths(prob: LQProblem, u1, u2, x, y, z, bundle) -> np.ndarray:
    """``B^T y + D^T z + S x + R u`` along the paths, ``(paths, nodes, 2)``."""
    grid, m = bundle.grid, prob.m
    reg = bundle.regime_path
    out = np.empty(x.shape + (2,))
    for k in range(grid.n_nodes):
        t = float(grid.nodes[k])
        ik = reg[:, k]
        c = {n: _along(getattr(prob, n), t, ik, m) for n in ("B1", "B2", "D1", "D2", "S1", "S2", "R11", "R12", "R22")}
        zk = z[:, k, 0]
        out[:, k, 0] = c["B1"] * y[:, k] + c["D1"] * zk + c["S1"] * x[:, k] + c["R11"] * u1[:, k] + c["R12"] * u2[:, k]
        out[:, k, 1] = c["B2"] * y[:, k] + c["D2"] * zk + c["S2"] * x[:, k] + c["R12"] * u1[:, k] + c["R22"] * u2[:, k]
    return out


def stationarity_residual(prob: LQProblem, u1, u2, x, y, z, bundle: DriverBundle) -> float:
    """Weighted ``L^{2,K}`` norm of ``B^T y + D^T z + S x + R u``."""
    P, M = bundle.n_paths, bundle.grid.n_nodes
    u1 = np.broadcast_to(np.asarray(u1, dtype=float), (P, M))
    u2 = np.broadcast_to(np.asarray(u2, dtype=float), (P, M))
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        z = z[:, :, None]
    return weighted_l2k_norm(_stationarity_paths(prob, u1, u2, x, y, z, bundle), prob.K, bundle.grid)


def optimal_controls(prob: LQProblem, x, y, z, bundle: DriverBundle) -> tuple[np.ndarray, np.ndarray]:
    """``u = -R^{-1}(B^T y + D^T z + S x)`` along the paths."""
    grid, m = bundle.grid, prob.m
    reg = bundle.regime_path
    u = np.empty(x.shape + (2,))
    for k in range(grid.n_nodes):
        t = float(grid.nodes[k])
        for j in range(1, m + 1):
            sel = reg[:, k] == j
            if not np.any(sel):
                continue
            blk = prob.blocks(t, j)
            rhs = np.stack([y[sel, k], z[sel, k, 0], x[sel, k]], axis=1)  # (p, 3)
            lin = np.hstack([blk["B"].T, blk["D"].T, blk["S"]])  # (2, 3)
            u[sel, k] = -np.linalg.solve(blk["R"], lin @ rhs.T).T
    return u[:, :, 0], u[:, :, 1]


@dataclass(frozen=True)
class GameSolution:
    u1: np.ndarray
    u2: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    f: np.ndarray
    J: float
    J_se: float
    stationarity: float
    u_norms: tuple
    tail_bound: float | None
    trace: object = None
    theta: ThetaProcess | None = None


def solve_game(
    prob: LQProblem,
    bundle: DriverBundle,
    tol: float = 1e-3,
    enforce_pattern: bool = True,
    probes=None,
) -> GameSolution:
    """Solve the Hamiltonian system by continuation and recover the saddle controls.

    ``enforce_pattern=False`` skips the zero-sum sign check (it only holds
    when ``Q = S = 0``), e.g. to study problems with a cross term.
    """
    _require_scalar(prob)
    kappa = compute_kappa_x(prob, probes)
    admissible_k_bound(prob, kappa, probes)
    if enforce_pattern:
        rep = check_assumption_d(prob, probes)
        if not rep.zero_sum_pattern:
            raise AssumptionError(f"zero-sum sign pattern fails: {rep.details[:3]}")
    spec = assemble_coupled_system(prob, probes)
    base = zero_forcing(bundle)
    forcing = Forcing(np.full(bundle.n_paths, prob.x0), base.phi, base.psi, base.eta, base.zeta)
    theta, trace = solve_fbsde(spec, bundle, tol=tol, forcing=forcing)
    u1, u2 = optimal_controls(prob, theta.x, theta.y, theta.z, bundle)
    cost = evaluate_cost(prob, u1, u2, bundle)
    stat = stationarity_residual(prob, u1, u2, theta.x, theta.y, theta.z, bundle)
    norms = (weighted_l2k_norm(u1, prob.K, bundle.grid), weighted_l2k_norm(u2, prob.K, bundle.grid))
    return GameSolution(
        u1=u1, u2=u2, x=theta.x, y=theta.y, z=theta.z, r=theta.r, f=theta.f,
        J=cost.J, J_se=cost.se, stationarity=stat, u_norms=norms, tail_bound=cost.tail_bound,
        trace=trace, theta=theta,
    )


def _variation_state(prob: LQProblem, v: np.ndarray, player: int, bundle: DriverBundle) -> np.ndarray:
    """``dx1 = (A x1 + B_p v) ds + (C x1 + D_p v) dW``, ``x1(t0) = 0``."""
    grid, m = bundle.grid, prob.m
    P, N, dt = bundle.n_paths, grid.n_steps, grid.dt
    reg = bundle.regime_path
    dW = bundle.w_increments[:, :, 0]
    Bn, Dn = ("B1", "D1") if player == 1 else ("B2", "D2")
    x1 = np.zeros((P, N + 1))
    for k in range(N):
        t = float(grid.nodes[k])
        ik = reg[:, k]
        A, C = _along(prob.A, t, ik, m), _along(prob.C, t, ik, m)
        Bp, Dp = _along(getattr(prob, Bn), t, ik, m), _along(getattr(prob, Dn), t, ik, m)
        x1[:, k + 1] = x1[:, k] + (A * x1[:, k] + Bp * v[:, k]) * dt + (C * x1[:, k] + Dp * v[:, k]) * dW[:, k]
    return x1


@dataclass(frozen=True)
class SaddleReport:
    violations: int
    first_order_violations: int
    second_order_sign_violations: int
    expansion_error: float
    records: list


def _perturbation(rng: np.random.Generator, bundle: DriverBundle) -> np.ndarray:
    """A random adapted control: damped oscillation plus a bounded function of ``W``."""
    t = bundle.grid.nodes
    a, c = rng.normal(size=2)
    omega, phase = rng.uniform(0.0, 3.0), rng.uniform(0.0, 2 * np.pi)
    lam = rng.uniform(0.1, 1.0)
    return a * np.cos(omega * t + phase) * np.exp(-lam * t)[None, :] + c * np.tanh(bundle.w_path[:, :, 0])


def saddle_check(
    prob: LQProblem,
    sol: GameSolution,
    bundle: DriverBundle,
    n_perturbations: int = 20,
    eps=(0.05, 0.1, 0.2),
    seed: int = 0,
    band: float = 3.0,
) -> SaddleReport:
    """Perturb each player's control and check the saddle inequalities.

    For player 1 the cost change must not fall below ``-band`` standard errors
    (player 2: not above ``+band``).  The first-order term of the expansion is
    computed from the variation state and must be within its band of zero;
    the second-order term must carry the sign of ``R11`` (resp. ``R22``).
    """
    base = _running_cost(prob, sol.x, sol.u1, sol.u2, bundle)
    base_pp = 0.5 * _discounted_integral(base, prob.K, bundle)
    grid, m, K = bundle.grid, prob.m, prob.K
    reg = bundle.regime_path
    records = []
    viol = first_viol = second_viol = 0
    worst_expansion = 0.0
    for n in range(n_perturbations):
        rng = path_rng(seed, _TAG_SADDLE, n)
        v = _perturbation(rng, bundle)
        for player in (1, 2):
            x1 = _variation_state(prob, v, player, bundle)
            # integrands of the first- and second-order terms
            lin = np.empty_like(v)
            quad = np.empty_like(v)
            Sn, Rn = ("S1", "R11") if player == 1 else ("S2", "R22")
            for k in range(grid.n_nodes):
                t = float(grid.nodes[k])
                ik = reg[:, k]
                c = {nm: _along(getattr(prob, nm), t, ik, m) for nm in ("Q", "S1", "S2", "R11", "R12", "R22")}
                own = c["R11"] * sol.u1[:, k] + c["R12"] * sol.u2[:, k] if player == 1 else (
                    c["R12"] * sol.u1[:, k] + c["R22"] * sol.u2[:, k])
                lin[:, k] = (
                    (c["Q"] * sol.x[:, k] + c["S1"] * sol.u1[:, k] + c["S2"] * sol.u2[:, k]) * x1[:, k]
                    + (c[Sn] * sol.x[:, k] + own) * v[:, k]
                )
                quad[:, k] = c["Q"] * x1[:, k] ** 2 + 2.0 * c[Sn] * x1[:, k] * v[:, k] + c[Rn] * v[:, k] ** 2
            lin_pp = _discounted_integral(lin, K, bundle)
            quad_pp = 0.5 * _discounted_integral(quad, K, bundle)
            lin_se = float(np.std(lin_pp, ddof=1) / np.sqrt(len(lin_pp)))
            sign = 1.0 if player == 1 else -1.0
            if abs(lin_pp.mean()) > band * lin_se + 1e-12:
                first_viol += 1
            if sign * quad_pp.mean() < -1e-12:
                second_viol += 1
            for e in eps:
                u1 = sol.u1 + e * v if player == 1 else sol.u1
                u2 = sol.u2 + e * v if player == 2 else sol.u2
                x = sol.x + e * x1
                pert = 0.5 * _discounted_integral(_running_cost(prob, x, u1, u2, bundle), K, bundle)
                diff = pert - base_pp
                dJ = float(diff.mean())
                se = float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
                bad = sign * dJ < -(band * se + 1e-12)
                viol += int(bad)
                expansion = e * lin_pp + e**2 * quad_pp
                worst_expansion = max(worst_expansion, float(np.max(np.abs(diff - expansion))))
                records.append({"perturbation": n, "player": player, "eps": e, "dJ": dJ, "se": se,
                                "first_order": float(e * lin_pp.mean()), "second_order": float(e**2 * quad_pp.mean()),
                                "violation": bool(bad)})
    return SaddleReport(violations=viol, first_order_violations=first_viol,
                        second_order_sign_violations=second_viol, expansion_error=worst_expansion, records=records)


@dataclass(frozen=True)
class ControlMap:
    """``u~ = u + R^{-1} S x`` and its inverse, applied along paths."""

    prob: LQProblem

    def _shift(self, x: np.ndarray, bundle: DriverBundle) -> np.ndarray:
        grid, m = bundle.grid, self.prob.m
        reg = bundle.regime_path
        out = np.empty(x.shape + (2,))
        for k in range(grid.n_nodes):
            t = float(grid.nodes[k])
            table = np.stack([
                (np.linalg.inv(self.prob.blocks(t, j)["R"]) @ self.prob.blocks(t, j)["S"])[:, 0]
                for j in range(1, m + 1)
            ])
            out[:, k] = table[reg[:, k] - 1] * x[:, k, None]
        return out

    def to_tilde(self, u1, u2, x, bundle):
        s = self._shift(x, bundle)
        return u1 + s[:, :, 0], u2 + s[:, :, 1]

    def from_tilde(self, v1, v2, x, bundle):
        s = self._shift(x, bundle)
        return v1 - s[:, :, 0], v2 - s[:, :, 1]

    def is_identity(self, probes=None) -> bool:
        return all(
            np.allclose(self.prob.blocks(t, j)["S"], 0.0)
            for t, j in self.prob.probe_points(_probe_times(self.prob, probes))
        )


def cross_term_reduce(prob: LQProblem) -> tuple[LQProblem, ControlMap]:
    """Remove the state-control cross term: ``A~ = A - B R^{-1} S``, ``C~ = C - D R^{-1} S``,
    ``Q~ = Q - S^T R^{-1} S``, ``S~ = 0``; returns the new problem and the control map."""

    def inv_rs(t, i):
        blk = prob.blocks(t, i)
        try:
            return blk, np.linalg.solve(blk["R"], blk["S"])
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"R is singular at t={t}, regime {i}") from exc

    def A_t(t, i):
        blk, rs = inv_rs(t, i)
        return blk["A"] - blk["B"] @ rs

    def C_t(t, i):
        blk, rs = inv_rs(t, i)
        return blk["C"] - blk["D"] @ rs

    def Q_t(t, i):
        blk, rs = inv_rs(t, i)
        return blk["Q"] - blk["S"].T @ rs

    inv_rs(prob.t0, 1)  # fail early on a singular weight
    zero1 = lambda t, i: np.zeros_like(prob.S1(t, i))  # noqa: E731
    zero2 = lambda t, i: np.zeros_like(prob.S2(t, i))  # noqa: E731
    new = replace(prob, A=A_t, C=C_t, Q=Q_t, S1=zero1, S2=zero2, name=f"{prob.name}-reduced")
    return new, ControlMap(prob)

