"""Noise sources: Brownian motion, fractional Brownian motion, a regime chain.

All three drivers are sampled on a shared :class:`~fbsde_lab.timegrid.TimeGrid`
and bundled into a :class:`DriverBundle`.  Randomness follows a single seed
policy: a root seed is split into one independent stream per
``(driver, path)`` via :class:`numpy.random.SeedSequence` spawn keys, so a given
path is reproduced bit-for-bit regardless of how many other paths are drawn.

Regimes are labelled ``1..m``.  The chain is simulated exactly (exponential
holding times) and the jump times are kept, so occupation times, jump counts
and the compensated martingales ``M_ij`` are exact on every grid step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, LinAlgError

from .timegrid import TimeGrid, validate_hurst

__all__ = [
    "InvalidGeneratorError",
    "ConditioningError",
    "InvalidPairError",
    "RegimePaths",
    "DriverBundle",
    "validate_generator",
    "path_rng",
    "simulate_brownian",
    "fbm_covariance",
    "simulate_fbm",
    "simulate_regime_path",
    "ordered_pairs",
    "compensated_martingales",
    "simulate_bundle",
    "dump_bundle_csv",
]

# driver tags used in the seed spawn keys
_TAG_BROWNIAN = 0
_TAG_FBM = 1
_TAG_CHAIN = 2


class InvalidGeneratorError(ValueError):
    """Raised when a rate matrix is not a valid Markov generator."""


class ConditioningError(RuntimeError):
    """Raised when a covariance or design matrix cannot be factorised."""


class InvalidPairError(ValueError):
    """Raised when a martingale is requested for a pair ``(i, i)``."""


def validate_generator(q, atol: float = 1e-12) -> np.ndarray:
    """Return ``q`` as a float array after checking the generator invariants."""
    q = np.array(q, dtype=float, ndmin=2)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise InvalidGeneratorError(f"generator must be a non-empty square matrix, got shape {q.shape}")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise InvalidGeneratorError("off-diagonal rates must be non-negative")
    sums = q.sum(axis=1)
    if np.any(np.abs(sums) > atol):
        raise InvalidGeneratorError(f"rows must sum to zero, got row sums {sums.tolist()}")
    return q


def path_rng(seed: int, tag: int, path: int) -> np.random.Generator:
    """Independent stream for one (driver, path) pair under the root ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(tag, path))))


def _standard_normals(seed: int, tag: int, n_paths: int, size: int) -> np.ndarray:
    out = np.empty((n_paths, size))
    for p in range(n_paths):
        out[p] = path_rng(seed, tag, p).standard_normal(size)
    return out


def simulate_brownian(grid: TimeGrid, d: int, n_paths: int, seed: int) -> np.ndarray:
    """Brownian increments, shape ``(n_paths, n_steps, d)`` with variance ``dt``."""
    if n_paths < 1 or d < 1:
        raise ValueError("n_paths and d must be positive")
    z = _standard_normals(seed, _TAG_BROWNIAN, n_paths, grid.n_steps * d)
    return np.sqrt(grid.dt) * z.reshape(n_paths, grid.n_steps, d)


def fbm_covariance(times, H: float, origin: float = 0.0) -> np.ndarray:
    """``Cov(B(t), B(u)) = (|t|^{2H} + |u|^{2H} - |t-u|^{2H}) / 2`` relative to ``origin``."""
    t = np.asarray(times, dtype=float) - origin
    h2 = 2.0 * H
    return 0.5 * (np.abs(t)[:, None] ** h2 + np.abs(t)[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)


@lru_cache(maxsize=16)
def _fbm_factor(n_steps: int, span: float, H: float) -> np.ndarray:
    # the increments of fBm are stationary, so the factor depends only on the
    # step count, the span and H (not on where the grid starts)
    times = np.linspace(0.0, span, n_steps + 1)[1:]
    cov = fbm_covariance(times, H)
    try:
        factor = cholesky(cov, lower=True)
    except LinAlgError as exc:
        jitter = 1e-12 * float(np.max(np.diag(cov)))
        raise ConditioningError(
            f"fBm covariance with {n_steps} nodes is not numerically positive definite; "
            f"retry with fewer steps or add a diagonal jitter of about {jitter:.1e}"
        ) from exc
    factor.setflags(write=False)
    return factor


def simulate_fbm(grid: TimeGrid, H: float, n_paths: int, seed: int) -> np.ndarray:
    """fBm values at the grid nodes, shape ``(n_paths, n_nodes)``, pinned to 0 at ``t0``.

    Exact Gaussian law via a dense Cholesky factor of the node covariance.
    """
    validate_hurst(H)
    factor = _fbm_factor(grid.n_steps, grid.t_end - grid.t0, float(H))
    z = _standard_normals(seed, _TAG_FBM, n_paths, grid.n_steps)
    out = np.zeros((n_paths, grid.n_nodes))
    out[:, 1:] = z @ factor.T
    return out


@dataclass(frozen=True)
class RegimePaths:
    """Exact chain trajectories plus their node samples (regimes are ``1..m``).

    ``jumps[p]`` holds ``(times, from_states, to_states)`` for path ``p``.
    """

    grid: TimeGrid
    values: np.ndarray
    jumps: list
    m: int
    i_start: int

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def occupation(self) -> np.ndarray:
        """Exact time spent in each regime during each step, ``(paths, steps, m)``."""
        nodes = self.grid.nodes
        out = np.zeros((self.n_paths, self.grid.n_steps, self.m))
        for p, (times, _, to_states) in enumerate(self.jumps):
            brk = np.concatenate([[self.grid.t0], times, [self.grid.t_end]])
            states = np.concatenate([[self.i_start], to_states])
            for i in np.unique(states):
                seg = np.where(states == i, np.diff(brk), 0.0)
                cum = np.concatenate([[0.0], np.cumsum(seg)])
                out[p, :, i - 1] = np.diff(np.interp(nodes, brk, cum))
        return out

    def jump_counts(self, pairs) -> np.ndarray:
        """Number of ``i -> j`` jumps in each step, ``(paths, steps, len(pairs))``."""
        nodes = self.grid.nodes
        out = np.zeros((self.n_paths, self.grid.n_steps, len(pairs)))
        col = {pair: c for c, pair in enumerate(pairs)}
        for p, (times, from_states, to_states) in enumerate(self.jumps):
            # a jump at time tau lies in step k when s_k < tau <= s_{k+1}
            steps = np.searchsorted(nodes, times, side="left") - 1
            for tau_step, i, j in zip(steps, from_states, to_states):
                c = col.get((int(i), int(j)))
                if c is not None:
                    out[p, tau_step, c] += 1.0
        return out


def simulate_regime_path(grid: TimeGrid, q, i_start: int, n_paths: int, seed: int) -> RegimePaths:
    """Exact jump-time simulation of the chain with generator ``q``.

    Holding times in ``i`` are exponential with rate ``-q_ii``; the next state
    is drawn with probabilities ``q_ij / -q_ii``.  Node values are
    right-continuous.
    """
    q = validate_generator(q)
    m = q.shape[0]
    if not 1 <= i_start <= m:
        raise ValueError(f"i_start must be in 1..{m}, got {i_start}")
    nodes = grid.nodes
    values = np.empty((n_paths, grid.n_nodes), dtype=np.int64)
    jumps = []
    for p in range(n_paths):
        rng = path_rng(seed, _TAG_CHAIN, p)
        t, state = grid.t0, i_start
        times, src, dst = [], [], []
        while True:
            rate = -q[state - 1, state - 1]
            if rate <= 0:
                break
            t += rng.exponential(1.0 / rate)
            if t > grid.t_end:
                break
            probs = q[state - 1].copy()
            probs[state - 1] = 0.0
            nxt = int(rng.choice(m, p=probs / rate)) + 1
            times.append(t)
            src.append(state)
            dst.append(nxt)
            state = nxt
        times_a = np.asarray(times, dtype=float)
        src_a = np.asarray(src, dtype=np.int64)
        dst_a = np.asarray(dst, dtype=np.int64)
        jumps.append((times_a, src_a, dst_a))
        idx = np.searchsorted(times_a, nodes, side="right")
        states = np.concatenate([[i_start], dst_a])
        values[p] = states[idx]
    return RegimePaths(grid=grid, values=values, jumps=jumps, m=m, i_start=i_start)


def ordered_pairs(m: int) -> list[tuple[int, int]]:
    """All ordered pairs ``(i, j)``, ``i != j``, of regimes ``1..m``."""
    return [(i, j) for i in range(1, m + 1) for j in range(1, m + 1) if i != j]


def compensated_martingales(regimes: RegimePaths, q, grid: TimeGrid, pairs=None) -> np.ndarray:
    """Increments of ``M_ij``: jump count minus ``q_ij`` times the occupation of ``i``.

    Returns shape ``(paths, steps, len(pairs))``; ``pairs`` defaults to all
    ordered pairs.
    """
    q = validate_generator(q)
    if regimes.grid != grid:
        raise ValueError("regime paths were simulated on a different grid")
    if pairs is None:
        pairs = ordered_pairs(q.shape[0])
    for i, j in pairs:
        if i == j:
            raise InvalidPairError(f"pair ({i}, {j}) has no martingale; pairs must have i != j")
    occ = regimes.occupation()
    counts = regimes.jump_counts(pairs)
    comp = np.stack([q[i - 1, j - 1] * occ[:, :, i - 1] for i, j in pairs], axis=2) if pairs else counts
    return counts - comp


@dataclass(frozen=True)
class DriverBundle:
    """All sampled noise on one grid.

    Shapes: ``w_increments (paths, steps, d)``, ``bh_path (paths, nodes)``,
    ``regime_path (paths, nodes)``, ``occupation (paths, steps, m)``,
    ``m_increments (paths, steps, len(pairs))``.
    """

    grid: TimeGrid
    w_increments: np.ndarray
    bh_path: np.ndarray
    regimes: RegimePaths
    occupation: np.ndarray
    m_increments: np.ndarray
    pairs: list
    q: np.ndarray
    H: float
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.w_increments.shape[0]

    @property
    def d(self) -> int:
        return self.w_increments.shape[2]

    @property
    def m(self) -> int:
        return self.q.shape[0]

    @property
    def regime_path(self) -> np.ndarray:
        return self.regimes.values

    @property
    def bh_increments(self) -> np.ndarray:
        return np.diff(self.bh_path, axis=1)

    @property
    def w_path(self) -> np.ndarray:
        """Brownian values at the nodes, ``(paths, nodes, d)``."""
        out = np.zeros((self.n_paths, self.grid.n_nodes, self.d))
        out[:, 1:] = np.cumsum(self.w_increments, axis=1)
        return out


def simulate_bundle(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    d: int = 1,
    H: float = 0.75,
    q=None,
    i_start: int = 1,
) -> DriverBundle:
    """Sample Brownian, fractional and chain noise on ``grid`` from one root seed."""
    q = validate_generator([[0.0]] if q is None else q)
    dw = simulate_brownian(grid, d, n_paths, seed)
    bh = simulate_fbm(grid, H, n_paths, seed)
    regimes = simulate_regime_path(grid, q, i_start, n_paths, seed)
    pairs = ordered_pairs(q.shape[0])
    occ = regimes.occupation()
    counts = regimes.jump_counts(pairs)
    dm = counts.copy()
    for c, (i, j) in enumerate(pairs):
        dm[:, :, c] -= q[i - 1, j - 1] * occ[:, :, i - 1]
    return DriverBundle(
        grid=grid,
        w_increments=dw,
        bh_path=bh,
        regimes=regimes,
        occupation=occ,
        m_increments=dm,
        pairs=pairs,
        q=q,
        H=float(H),
        seed=int(seed),
    )


def dump_bundle_csv(bundle: DriverBundle, out_dir, prefix: str = "drivers") -> list[Path]:
    """One CSV per driver with columns ``time, path_id, value(s)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nodes = bundle.grid.nodes
    w = bundle.w_path
    tables = {
        "brownian": (["w%d" % (i + 1) for i in range(bundle.d)], lambda p, k: list(w[p, k])),
        "fbm": (["bh"], lambda p, k: [bundle.bh_path[p, k]]),
        "regime": (["regime"], lambda p, k: [int(bundle.regime_path[p, k])]),
    }
    written = []
    for name, (cols, row) in tables.items():
        path = out_dir / f"{prefix}.{name}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "path_id", *cols])
            for p in range(bundle.n_paths):
                for k in range(bundle.grid.n_nodes):
                    writer.writerow([repr(float(nodes[k])), p, *row(p, k)])
        written.append(path)
    return written
