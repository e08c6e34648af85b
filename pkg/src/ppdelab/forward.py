"""Euler-Maruyama simulation of the path-dependent forward SDE."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ppdelab import rng
from ppdelab.errors import GridError
from ppdelab.models import Model
from ppdelab.paths import Path, TimeGrid


@dataclass(frozen=True)
class ForwardEnsemble:
    """Samples of the driving path and forward state on ``grid`` from node ``start``.

    ``W`` and ``X`` hold full histories on the global grid: nodes before ``start`` carry the
    conditioning data, so ``W[:, : j + 1]`` is exactly the clamped path ``omega (x)_t B``
    the coefficients read at node ``j``.
    """

    model: Model
    grid: TimeGrid
    start: int
    x: np.ndarray
    seed: int
    W: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    aborted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    stream: int = rng.FORWARD
    increments: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def t(self) -> float:
        return self.grid.time(self.start)

    @property
    def local_times(self) -> np.ndarray:
        return self.grid.nodes[self.start :]

    @property
    def B(self) -> np.ndarray:
        """Driving Brownian paths restarted at zero at the start node."""
        return self.W[:, self.start :] - self.W[:, self.start : self.start + 1]

    @property
    def X_local(self) -> np.ndarray:
        return self.X[:, self.start :]

    @property
    def valid(self) -> np.ndarray:
        mask = np.ones(self.N, dtype=bool)
        mask[self.aborted] = False
        return mask


def conditioning_arrays(model: Model, grid: TimeGrid, start: int, omega: Path | None, x, x_path: Path | None = None):
    """Histories ``(w, xs)`` of shape ``(start + 1, d)`` and ``(start + 1, n)``."""
    if omega is None:
        omega = Path.zeros(grid, model.d)
    if omega.dim != model.d:
        raise GridError(f"conditioning path has dimension {omega.dim}, model needs d={model.d}")
    if omega.grid.m != grid.m or abs(omega.grid.T - grid.T) > 1e-12 or abs(omega.grid.t0 - grid.t0) > 1e-12:
        raise GridError("conditioning path must live on the simulation grid")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.n,):
        raise GridError(f"state has shape {x.shape}, model needs n={model.n}")
    w = omega.values[: start + 1].copy()
    if x_path is not None:
        if x_path.dim != model.n:
            raise GridError(f"state path has dimension {x_path.dim}, model needs n={model.n}")
        xs = x_path.values[: start + 1].copy()
        xs[-1] = x
    else:
        xs = np.repeat(x[None, :], start + 1, axis=0)
    return w, xs


def euler(model: Model, grid: TimeGrid, start: int, w0: np.ndarray, xs0: np.ndarray, dB: np.ndarray):
    """Run the Euler recursion from node ``start`` with given increments ``dB (N, K, d)``.

    ``w0``/``xs0`` are conditioning histories, either shared ``(start+1, k)`` or per sample
    ``(N, start+1, k)``. Returns ``(W, X, aborted)``.
    """
    N, K, d = dB.shape
    if start + K != grid.m:
        raise GridError("increments do not cover the grid tail")
    n = model.n
    times = grid.nodes
    dt = grid.dt
    W = np.empty((N, grid.m + 1, d))
    X = np.empty((N, grid.m + 1, n))
    W[:, : start + 1] = w0
    X[:, : start + 1] = xs0
    bad = np.zeros(N, dtype=bool)
    with np.errstate(invalid="ignore", over="ignore"):
        for j in range(start, grid.m):
            th = times[: j + 1]
            b = model.drift(th, W[:, : j + 1], X[:, : j + 1])
            s = model.vol(th, W[:, : j + 1], X[:, : j + 1])
            inc = dB[:, j - start]
            X[:, j + 1] = X[:, j] + b * dt + np.einsum("pnd,pd->pn", s, inc)
            W[:, j + 1] = W[:, j] + inc
            now_bad = ~np.isfinite(X[:, j + 1]).all(axis=1)
            if now_bad.any():
                bad |= now_bad
                X[now_bad, j + 1] = np.nan
    return W, X, np.flatnonzero(bad)


def brownian_increments(seed: int, N: int, K: int, d: int, dt: float, stream: int = rng.FORWARD, offset: int = 0):
    """``(N, K, d)`` Gaussian increments keyed by (seed, stream, path index, local node)."""
    idx = np.arange(N) + offset
    out = np.empty((N, K, d))
    for j in range(K):
        out[:, j] = rng.normals(seed, stream, idx, j, d)
    return np.sqrt(dt) * out


def simulate_forward(
    model: Model,
    t: float,
    omega: Path | None,
    x,
    N: int,
    seed: int,
    *,
    grid: TimeGrid | None = None,
    x_path: Path | None = None,
    stream: int = rng.FORWARD,
    offset: int = 0,
) -> ForwardEnsemble:
    """Simulate ``N`` forward paths started at ``(t, omega, x)``.

    The grid is taken from ``omega`` unless given; ``t`` must be one of its nodes.
    """
    if N < 1:
        raise ValueError("need at least one sample")
    if grid is None:
        if omega is None:
            raise GridError("pass a grid or a conditioning path")
        grid = omega.grid
    start = grid.index(t)
    if start == grid.m:
        raise GridError("cannot simulate from the terminal node")
    w0, xs0 = conditioning_arrays(model, grid, start, omega, x, x_path)
    dB = brownian_increments(seed, N, grid.m - start, model.d, grid.dt, stream, offset)
    W, X, aborted = euler(model, grid, start, w0, xs0, dB)
    return ForwardEnsemble(model, grid, start, xs0[-1].copy(), int(seed), W, X, aborted, stream, dB)


def moment_estimate(ens: ForwardEnsemble, p: float) -> float:
    """Sample mean of ``sup_s |X_s|^p`` over valid paths."""
    if p < 1:
        raise ValueError("moment order must be at least 1")
    X = ens.X_local[ens.valid]
    if len(X) == 0:
        raise ValueError("ensemble has no valid samples")
    sup = np.max(np.linalg.norm(X, axis=2), axis=1)
    return float(np.mean(sup**p))


@dataclass(frozen=True)
class StrongError:
    errors: tuple  # (coarse vs fine, fine vs finest)
    stderrs: tuple
    order: float
    r: int


def _interp_path(path: Path | None, grid: TimeGrid) -> Path | None:
    if path is None:
        return None
    v = np.stack([np.interp(grid.nodes, path.grid.nodes, path.values[:, j]) for j in range(path.dim)], axis=1)
    v[0] = 0.0
    return Path(grid, v)


def strong_error(
    model: Model,
    t: float,
    omega: Path | None,
    x,
    grid: TimeGrid,
    r: int,
    N: int,
    seed: int,
    x_path: Path | None = None,
) -> StrongError:
    """Coupled-refinement strong error of the Euler scheme.

    Increments are drawn on the finest grid (``r**2`` refinement) and summed to the coarser
    ones. Errors are sample means of the max over the coarser grid's nodes of ``|X_c - X_f|``.
    """
    if int(r) != r or r < 2:
        raise ValueError("refinement factor must be an integer >= 2")
    r = int(r)
    grids = [grid, grid.refine(r), grid.refine(r * r)]
    starts = [g.index(t) for g in grids]
    finest = grids[2]
    K2 = finest.m - starts[2]
    dB2 = brownian_increments(seed, N, K2, model.d, finest.dt)
    incs = [dB2.reshape(N, -1, r * r, model.d).sum(axis=2), dB2.reshape(N, -1, r, model.d).sum(axis=2), dB2]
    paths = []
    for g, s, inc in zip(grids, starts, incs):
        w0, xs0 = conditioning_arrays(model, g, s, _interp_path(omega, g), x, _interp_path(x_path, g))
        _, X, _ = euler(model, g, s, w0, xs0, inc)
        paths.append(X[:, s:])
    errs, ses = [], []
    for lvl in range(2):
        coarse, fine = paths[lvl], paths[lvl + 1][:, ::r]
        e = np.max(np.linalg.norm(coarse - fine, axis=2), axis=1)
        errs.append(float(np.mean(e)))
        ses.append(float(np.std(e) / np.sqrt(N)))
    if errs[1] > 1e-12 and errs[0] > 1e-12:
        order = float(np.log(errs[0] / errs[1]) / np.log(r))
    else:
        order = float("nan")
    return StrongError(tuple(errs), tuple(ses), order, r)


def ensemble_to_csv(ens: ForwardEnsemble, fh) -> None:
    """One row per (sample, node): sample id, time, B components, X components."""
    wr = csv.writer(fh)
    d, n = ens.model.d, ens.model.n
    wr.writerow(["sample", "time"] + [f"B{j}" for j in range(d)] + [f"X{j}" for j in range(n)])
    B, X, times = ens.B, ens.X_local, ens.local_times
    for p in range(ens.N):
        for j, s in enumerate(times):
            wr.writerow([p, repr(float(s))] + [repr(float(v)) for v in B[p, j]] + [repr(float(v)) for v in X[p, j]])
