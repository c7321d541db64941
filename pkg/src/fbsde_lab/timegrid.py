"""Uniform time grids, the fractional kernel and the weighted norms.

The solution spaces used throughout the package are built from two
quadratic functionals:

* the discounted mean-square norm ``{E int |f(s) e^{Ks}|^2 ds}^{1/2}``;
* the fractional "norm" ``int int f(u) f(s) phi_H(u, s) ds du`` with
  ``phi_H(u, s) = H (2H - 1) |u - s|^{2H - 2}``.

The kernel is integrable but unbounded on the diagonal, so every quadrature
here integrates the kernel exactly over grid cells (product integration)
instead of sampling it pointwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import matmul_toeplitz

__all__ = [
    "GridError",
    "SingularityError",
    "DegenerateInputError",
    "TimeGrid",
    "WeightParams",
    "NormReport",
    "make_grid",
    "validate_hurst",
    "phi_h",
    "cell_kernel_weights",
    "history_kernel_weights",
    "weighted_l2k_norm",
    "weighted_l2k_report",
    "weighted_sq_integrals",
    "l2h_norm",
]


class GridError(ValueError):
    """Raised for an empty or otherwise invalid time grid."""


class SingularityError(ValueError):
    """Raised when the fractional kernel is evaluated on its diagonal."""


class DegenerateInputError(ValueError):
    """Raised when a path ensemble is empty or has the wrong shape."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = s_0 < s_1 < ... < s_n = t_end``."""

    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.t0) or not np.isfinite(self.t_end):
            raise GridError("grid endpoints must be finite")
        if self.t0 < 0:
            raise GridError(f"t0 must be non-negative, got {self.t0}")
        if not self.t_end > self.t0:
            raise GridError(f"empty span: t_end={self.t_end} <= t0={self.t0}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        k = np.arange(self.n_steps + 1, dtype=float)
        s = self.t0 + k * self.dt
        s[-1] = self.t_end  # pin the last node exactly
        s.setflags(write=False)
        return s

    def node(self, k: int) -> float:
        return float(self.nodes[k])

    def index_of(self, t: float, atol: float = 1e-9) -> int:
        """Index of the node equal to ``t`` (within ``atol`` of a step)."""
        pos = (t - self.t0) / self.dt
        k = int(round(pos))
        if k < 0 or k > self.n_steps or abs(pos - k) > atol * max(1.0, abs(pos)):
            raise GridError(f"time {t} is not a node of {self}")
        return k

    def restrict(self, t_end: float) -> "TimeGrid":
        """Sub-grid ``[t0, t_end]`` sharing the same nodes."""
        k = self.index_of(t_end)
        return TimeGrid(self.t0, float(self.nodes[k]), k)


@dataclass(frozen=True)
class WeightParams:
    """Discount exponent ``K`` (any sign) and Hurst index ``H`` in (1/2, 1)."""

    K: float
    H: float

    def __post_init__(self) -> None:
        validate_hurst(self.H)


@dataclass(frozen=True)
class NormReport:
    """A truncated infinite-horizon norm and what was left out."""

    value: float
    horizon: float
    tail_bound: float | None


def make_grid(t0: float, t_end: float, n_steps: int) -> TimeGrid:
    """Build a :class:`TimeGrid`; raises :class:`GridError` on bad input."""
    return TimeGrid(float(t0), float(t_end), int(n_steps))


def validate_hurst(H: float) -> float:
    H = float(H)
    if not 0.5 < H < 1.0:
        raise ValueError(f"Hurst index must lie in the open interval (1/2, 1), got {H}")
    return H


def phi_h(u, s, H: float):
    """Kernel ``H(2H-1)|u-s|^{2H-2}``; singular (and rejected) at ``u == s``."""
    validate_hurst(H)
    u = np.asarray(u, dtype=float)
    s = np.asarray(s, dtype=float)
    gap = np.abs(u - s)
    if np.any(gap == 0.0):
        raise SingularityError("phi_H is singular on the diagonal u == s; use the integrated form")
    out = H * (2.0 * H - 1.0) * gap ** (2.0 * H - 2.0)
    return float(out) if out.ndim == 0 else out


def cell_kernel_weights(n: int, dt: float, H: float) -> np.ndarray:
    """Exact integrals of ``phi_H`` over pairs of grid cells at lag ``0..n-1``.

    ``w[k] = int_{cell j} int_{cell j+k} phi_H = dt^{2H}/2 (|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H})``,
    which is also the covariance of two fBm increments ``k`` steps apart.
    """
    validate_hurst(H)
    k = np.arange(n, dtype=float)
    h2 = 2.0 * H
    return 0.5 * dt**h2 * ((k + 1.0) ** h2 - 2.0 * k**h2 + np.abs(k - 1.0) ** h2)


def history_kernel_weights(nodes: np.ndarray, t: float, H: float) -> np.ndarray:
    """Exact cell integrals ``int_{u_j}^{u_{j+1}} phi_H(t, u) du`` for cells left of ``t``.

    ``nodes`` must end at or before ``t``; the result has ``len(nodes) - 1`` entries.
    """
    validate_hurst(H)
    nodes = np.asarray(nodes, dtype=float)
    gap = np.clip(t - nodes, 0.0, None) ** (2.0 * H - 1.0)
    return H * (gap[:-1] - gap[1:])


def _as_ensemble(f) -> np.ndarray:
    arr = np.asarray(f, dtype=float)
    if arr.size == 0:
        raise DegenerateInputError("empty path ensemble")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DegenerateInputError(f"expected (paths, nodes[, dim]) array, got shape {arr.shape}")
    return arr


def weighted_sq_integrals(f, K: float, grid: TimeGrid) -> np.ndarray:
    """Per-path trapezoidal ``int |f(s) e^{Ks}|^2 ds`` over the grid."""
    arr = _as_ensemble(f)
    if arr.shape[1] != grid.n_nodes:
        raise DegenerateInputError(
            f"paths have {arr.shape[1]} nodes but the grid has {grid.n_nodes}"
        )
    integrand = np.sum(arr**2, axis=2) * np.exp(2.0 * K * grid.nodes)[None, :]
    return trapezoid(integrand, dx=grid.dt, axis=1)


def weighted_l2k_norm(f, K: float, grid: TimeGrid) -> float:
    """Monte Carlo ``{E int |f(s) e^{Ks}|^2 ds}^{1/2}`` on the truncation window."""
    return float(np.sqrt(np.mean(weighted_sq_integrals(f, K, grid))))


def weighted_l2k_report(f, K: float, grid: TimeGrid) -> NormReport:
    """The truncated norm together with a tail estimate for decaying weights.

    For ``K < 0`` the tail beyond ``t_end`` is estimated by freezing
    ``E|f(t_end)|^2`` and integrating the weight, i.e.
    ``E|f(t_end) e^{K t_end}|^2 / (2|K|)``.  No estimate is given for ``K >= 0``.
    """
    arr = _as_ensemble(f)
    value = weighted_l2k_norm(arr, K, grid)
    tail = None
    if K < 0:
        last = np.mean(np.sum(arr[:, -1, :] ** 2, axis=1)) * np.exp(2.0 * K * grid.t_end)
        tail = float(last / (2.0 * abs(K)))
    return NormReport(value=value, horizon=grid.t_end, tail_bound=tail)


def l2h_norm(f, H: float, grid: TimeGrid) -> float:
    """Double integral ``int int <f(u), f(s)> phi_H(u, s) ds du`` over the grid.

    Returned without a square root, matching the quadratic form used to define
    the fractional solution space.  ``f`` is deterministic, shape ``(nodes,)``
    or ``(nodes, dim)``.  Each cell carries the trapezoidal average of its end
    values and every cell pair (diagonal included) uses the exact kernel
    integral, so a constant over the whole grid is integrated exactly; a jump
    at an interior node costs one half-weighted cell.
    """
    validate_hurst(H)
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != grid.n_nodes:
        raise DegenerateInputError(f"path has {arr.shape[0]} nodes but the grid has {grid.n_nodes}")
    cells = 0.5 * (arr[:-1] + arr[1:])
    w = cell_kernel_weights(grid.n_steps, grid.dt, H)
    total = 0.0
    for j in range(cells.shape[1]):
        c = cells[:, j]
        total += float(c @ matmul_toeplitz((w, w), c))
    return total
