"""Discrete canonical path spaces: grids, paths, stopping, concatenation, shifts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ppdelab.errors import GridError

# relative tolerance (in units of the step) for deciding that a time is a grid node
NODE_RTOL = 1e-6


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t1 < ... < tm = T``."""

    t0: float
    T: float
    m: int

    def __post_init__(self):
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise GridError(f"grid needs a positive integer step count, got m={self.m!r}")
        if not self.T > self.t0:
            raise GridError(f"grid horizon T={self.T} must exceed start t0={self.t0}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.m

    @property
    def nodes(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.m + 1)
        t[-1] = self.T
        return t

    def index(self, s: float) -> int:
        """Node index of time ``s``; raises :class:`GridError` when ``s`` is off-grid."""
        x = (s - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > NODE_RTOL or i < 0 or i > self.m:
            raise GridError(f"time {s} is not a node of grid [{self.t0}, {self.T}] with m={self.m}")
        return i

    def time(self, i: int) -> float:
        if i < 0 or i > self.m:
            raise GridError(f"node {i} outside 0..{self.m}")
        return float(self.nodes[i])

    def contains(self, s: float) -> bool:
        try:
            self.index(s)
        except GridError:
            return False
        return True

    def sub(self, i: int) -> "TimeGrid":
        """The grid restricted to ``[t_i, T]``."""
        if i < 0 or i >= self.m:
            raise GridError(f"cannot start a sub-grid at node {i} of {self.m}")
        return TimeGrid(self.time(i), self.T, self.m - i)

    def refine(self, r: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.m * int(r))

    def aligned_with(self, other: "TimeGrid") -> bool:
        """True when ``other`` is a tail of this grid (same step, shared horizon)."""
        return (
            abs(self.T - other.T) <= NODE_RTOL * self.dt
            and abs(self.dt - other.dt) <= NODE_RTOL * self.dt
            and self.contains(other.t0)
        )


@dataclass(frozen=True)
class Path:
    """A k-dimensional path stored at the nodes of ``grid``, starting at the origin."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.m + 1:
            raise GridError(f"path needs {self.grid.m + 1} node values, got shape {v.shape}")
        if np.any(v[0] != 0.0):
            raise GridError("paths must start at the origin")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int) -> "Path":
        return cls(grid, np.zeros((grid.m + 1, dim)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, s: float) -> np.ndarray:
        """Node value at grid time ``s``."""
        return self.values[self.grid.index(s)].copy()

    def __call__(self, s: float) -> np.ndarray:
        """Piecewise-linear evaluation at any ``s`` in ``[t0, T]``."""
        t = self.grid.nodes
        return np.array([np.interp(s, t, self.values[:, j]) for j in range(self.dim)])

    def __sub__(self, other: "Path") -> "Path":
        _same_grid(self, other)
        return Path(self.grid, self.values - other.values)

    def __add__(self, other: "Path") -> "Path":
        _same_grid(self, other)
        return Path(self.grid, self.values + other.values)

    def split(self, d: int) -> tuple["Path", "Path"]:
        """Split an enlarged path into its first ``d`` and remaining coordinates."""
        if not 0 < d < self.dim:
            raise GridError(f"cannot split a {self.dim}-dimensional path at {d}")
        return Path(self.grid, self.values[:, :d]), Path(self.grid, self.values[:, d:])

    def history(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Grid times and values on ``[t0, s]`` (the non-anticipative view at ``s``)."""
        i = self.grid.index(s)
        return self.grid.nodes[: i + 1], self.values[: i + 1]


@dataclass(frozen=True)
class PathPoint:
    """An element ``(s, omega)`` of the space of stopped paths."""

    s: float
    path: Path

    def __post_init__(self):
        self.path.grid.index(self.s)


def _same_grid(a: Path, b: Path) -> None:
    ga, gb = a.grid, b.grid
    if ga.m != gb.m or abs(ga.t0 - gb.t0) > NODE_RTOL * ga.dt or abs(ga.T - gb.T) > NODE_RTOL * ga.dt:
        raise GridError("paths live on different grids")
    if a.dim != b.dim:
        raise GridError(f"dimension mismatch: {a.dim} vs {b.dim}")


def clamp(path: Path, s: float) -> Path:
    """The stopped path ``omega_{. ^ s}``."""
    i = path.grid.index(s)
    v = path.values.copy()
    v[i + 1 :] = v[i]
    return Path(path.grid, v)


def uniform_norm(path: Path) -> float:
    return float(np.max(np.linalg.norm(path.values, axis=1)))


def lambda_distance(p: PathPoint, q: PathPoint) -> float:
    """``|s - s'| + ||omega_{.^s} - omega'_{.^s'}||``."""
    _same_grid(p.path, q.path)
    return abs(p.s - q.s) + uniform_norm(clamp(p.path, p.s) - clamp(q.path, q.s))


def concat(omega: Path, omega_tilde: Path, s: float) -> Path:
    """``omega (x)_s omega_tilde``: follow ``omega`` before ``s`` and ``omega_s + omega_tilde`` after."""
    g = omega.grid
    i = g.index(s)
    gt = omega_tilde.grid
    if abs(gt.t0 - s) > NODE_RTOL * g.dt or not g.aligned_with(gt):
        raise GridError(f"second path must live on the tail grid of the first, starting at {s}")
    if omega.dim != omega_tilde.dim:
        raise GridError(f"dimension mismatch: {omega.dim} vs {omega_tilde.dim}")
    v = omega.values.copy()
    v[i:] = omega.values[i] + omega_tilde.values
    return Path(g, v)


def eval_shifted(u: Callable, s: float, omega: Path, omega_tilde: Path, time: float | None = None):
    """Evaluate the shifted functional ``u^{s, omega}(omega_tilde) = u(omega (x)_s omega_tilde)``."""
    joined = concat(omega, omega_tilde, s)
    if time is None:
        return u(joined)
    return u(time, joined)


def hitting_node(values: np.ndarray, start: int, eps: float, cap: int) -> np.ndarray:
    """First node ``j > start`` with ``|x_j - x_start| >= eps``, else ``cap``; batched.

    ``values`` has shape ``(N, nodes, k)`` or ``(nodes, k)``.
    """
    v = np.asarray(values, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    out = np.full(v.shape[0], cap, dtype=int)
    if cap > start:
        dist = np.linalg.norm(v[:, start + 1 : cap + 1] - v[:, start : start + 1], axis=2)
        hit = dist >= eps
        any_hit = hit.any(axis=1)
        out[any_hit] = start + 1 + np.argmax(hit[any_hit], axis=1)
    return out[0] if single else out


def cap_node(grid: TimeGrid, start: int, eps: float, capped: bool = True) -> int:
    """Grid node of ``min(t + eps, T)`` rounded down (or ``T`` when uncapped)."""
    if not capped:
        return grid.m
    t = grid.time(start) + eps
    j = int(np.floor((t - grid.t0) / grid.dt + NODE_RTOL))
    return min(max(j, start), grid.m)


def hitting_time(path: Path, t: float, eps: float, capped: bool = True) -> float:
    """Exit time of the ``eps``-ball around ``path_t``, resolved at grid nodes."""
    if not eps > 0:
        raise ValueError("hitting radius must be positive")
    g = path.grid
    i = g.index(t)
    j = hitting_node(path.values, i, eps, cap_node(g, i, eps, capped))
    return g.time(int(j))
