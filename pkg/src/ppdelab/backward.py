"""Backward solvers for ``(Y, Z)``: regression Monte Carlo and a nested-tree oracle.

Both work on the concatenated path ``omega (x)_t B`` produced by :mod:`ppdelab.forward`.
Value queries, the enlarged-space lift and the dynamic programming check live here too.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ppdelab import rng
from ppdelab.errors import BudgetError, GridError, RegressionError, SolverError
from ppdelab.forward import ForwardEnsemble, conditioning_arrays, simulate_forward
from ppdelab.models import Model
from ppdelab.paths import Path, TimeGrid, cap_node, hitting_node

COND_MAX = 1e8
PRUNE_TOL = 1e-10
DEFAULT_BUDGET = 200_000_000  # simulated tree nodes per nested call
CHUNK_ROWS = 1 << 15


def _smean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean computed around the first element, exact for constant input."""
    a0 = np.take(a, [0], axis=axis)
    return np.squeeze(a0, axis=axis) + np.mean(a - a0, axis=axis)


def _sstd(a: np.ndarray, axis: int = 0, ddof: int = 0) -> np.ndarray:
    """Standard deviation around the first element, exactly zero for constant input."""
    return np.std(a - np.take(a, [0], axis=axis), axis=axis, ddof=ddof)


# ---------------------------------------------------------------- features


def _state_x(times, w, xs):
    return xs[:, -1, :]


def _state_xw(times, w, xs):
    return np.concatenate([xs[:, -1, :], w[:, -1, :]], axis=1)


def _state_path(times, w, xs):
    return np.concatenate([xs[:, -1, :], np.max(w[..., 0], axis=1)[:, None]], axis=1)


def _state_lookback(times, w, xs):
    return np.concatenate([w[:, -1, :], np.max(w[..., 0], axis=1)[:, None]], axis=1)


def _state_xpath(times, w, xs):
    x = xs[..., 0]
    area = np.sum(x[:, :-1] * np.diff(times), axis=1)
    return np.stack([x[:, -1], np.max(x, axis=1), area], axis=1)


FEATURES = {
    "x1": (_state_x, 1),
    "x2": (_state_x, 2),
    "xw2": (_state_xw, 2),
    "path2": (_state_path, 2),
    "lookback2": (_state_lookback, 2),
    "xpath2": (_state_xpath, 2),
}


def feature_matrix(name: str, times, w, xs) -> np.ndarray:
    """Raw regression features (without intercept) at the last node of the given history."""
    try:
        state, deg = FEATURES[name]
    except KeyError:
        raise ValueError(f"unknown feature map {name!r}; registered: {sorted(FEATURES)}") from None
    F = state(times, w, xs)
    if deg == 2:
        k = F.shape[1]
        cols = [F] + [F[:, a : a + 1] * F[:, a:] for a in range(k)]
        F = np.concatenate(cols, axis=1)
    return F


class _Projector:
    """Least-squares projection onto ``span{1, standardized features}``.

    Exactly collinear columns (relative pivot below ``PRUNE_TOL`` in a pivoted QR) are pruned;
    the remaining basis must have condition number at most ``COND_MAX``.
    """

    def __init__(self, F: np.ndarray, node: int):
        mu = F.mean(axis=0)
        sd = F.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        if keep.any():
            S = (F[:, keep] - mu[keep]) / sd[keep]
            A = np.concatenate([np.ones((len(F), 1)), S], axis=1)
            R, piv = scipy.linalg.qr(A, mode="r", pivoting=True)
            diag = np.abs(np.diag(R))
            cols = np.sort(piv[diag > PRUNE_TOL * diag[0]])
            if cols[0] != 0:
                cols = np.concatenate([[0], cols])
            self.A = A[:, cols]
            self.cond = float(np.linalg.cond(self.A))
            if not np.isfinite(self.cond) or self.cond > COND_MAX:
                raise RegressionError(f"regression at node {node} is ill-conditioned (cond={self.cond:.3g})", node)
            self.size = self.A.shape[1]
        else:
            self.A = None
            self.cond = 1.0
            self.size = 1

    def __call__(self, target: np.ndarray) -> np.ndarray:
        base = target[:1]
        centered = target - base
        if self.A is None:
            return np.broadcast_to(base + np.mean(centered, axis=0), target.shape).copy()
        coef, *_ = np.linalg.lstsq(self.A, centered, rcond=None)
        return base + self.A @ coef


# ---------------------------------------------------------------- LSMC


@dataclass(frozen=True)
class BackwardSolution:
    """``Y``/``Z`` per sample at the local nodes ``start..m`` of the ensemble grid."""

    ensemble: ForwardEnsemble
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    method: str
    v0: float
    stderr: float
    diagnostics: tuple = ()

    def to_csv(self, fh) -> None:
        wr = csv.writer(fh)
        d = self.Z.shape[2]
        wr.writerow(["sample", "node", "Y"] + [f"Z{j}" for j in range(d)])
        for p in range(self.Y.shape[0]):
            for j in range(self.Y.shape[1]):
                wr.writerow([p, j, repr(float(self.Y[p, j]))] + [repr(float(v)) for v in self.Z[p, j]])


def solve_backward_lsmc(model: Model, ens: ForwardEnsemble, features: str | None = None, picard: int = 3) -> BackwardSolution:
    """Multistep regression scheme.

    With ``S_{i+1} = g + sum_{j > i} f_j dt`` the recursion is
    ``Z_i = P_i[(S_{i+1} - E_i) dB_i] / dt``, ``Y_i = E_i + f(t_i, ., Y_i, Z_i) dt`` with
    ``E_i = P_i[S_{i+1}]`` and the implicit ``Y_i`` resolved by ``picard`` sweeps.
    """
    if picard < 1:
        raise ValueError("picard must be >= 1")
    if ens.model is not model and ens.model.name != model.name:
        raise SolverError("ensemble was simulated for a different model")
    if len(ens.aborted):
        raise SolverError(f"{len(ens.aborted)} forward samples aborted with non-finite values")
    features = features or model.features
    if features not in FEATURES:
        raise ValueError(f"unknown feature map {features!r}; registered: {sorted(FEATURES)}")
    g = ens.grid
    s, m, dt = ens.start, g.m, g.dt
    times = g.nodes
    N, K, d = ens.N, m - ens.start, model.d
    W, X = ens.W, ens.X
    dB = np.diff(W[:, s:], axis=1)
    Y = np.empty((N, K + 1))
    Z = np.zeros((N, K + 1, d))
    acc = model.terminal(times, W, X).astype(float)
    if not np.all(np.isfinite(acc)):
        raise SolverError("terminal values are not finite")
    Y[:, K] = acc
    diags = []
    for k in range(K - 1, -1, -1):
        j = s + k
        th, wh, xh = times[: j + 1], W[:, : j + 1], X[:, : j + 1]
        proj = _Projector(feature_matrix(features, th, wh, xh), j)
        E = proj(acc)
        Z[:, k] = proj((acc - E)[:, None] * dB[:, k]) / dt
        y = E
        if not model.driver_zero:
            for _ in range(picard):
                y = E + model.driver(th, wh, xh, y, Z[:, k]) * dt
            acc = acc + model.driver(th, wh, xh, y, Z[:, k]) * dt
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite Y at node {j}")
        Y[:, k] = y
        diags.append({"node": j, "cond": proj.cond, "basis": proj.size})
    v0 = float(Y[0, 0])
    stderr = float(_sstd(acc) / np.sqrt(N))
    return BackwardSolution(ens, Y, Z, "lsmc", v0, stderr, tuple(reversed(diags)))


# ---------------------------------------------------------------- nested tree


@dataclass(frozen=True)
class NestedEstimate:
    """Nested-tree value with per-root contributions (usable for CRN differences)."""

    value: float
    stderr: float
    samples: np.ndarray = field(repr=False)

    def __float__(self) -> float:
        return self.value


def default_branching(model: Model, steps: int, roots: int) -> tuple:
    """``(roots, 1, ..., 1)`` when the driver is affine in y and free of z, else binary below the root."""
    if steps < 1:
        return ()
    rest = 1 if model.driver_linear else 2
    return (int(roots),) + (rest,) * (steps - 1)


def nested_cost(schedule, queries: int = 1) -> int:
    tot, level = 0, 1
    for b in schedule:
        level *= int(b)
        tot += level
    return queries * tot


def _tree_chunk(model, grid, start, w0, xs0, schedule, seed, stream, crn, qids, roots, picard):
    """Simulate the subtrees under root branches ``roots`` for queries ``qids``.

    Returns ``Y1 (Q, R)`` (values one step after the start) and ``dB0 (Q, R, d)``.
    """
    d, n = model.d, model.n
    Q, R = len(qids), len(roots)
    m, dt = grid.m, grid.dt
    times = grid.nodes
    K = m - start
    sq = np.sqrt(dt)
    # rows ordered (query, node-in-level)
    W = np.empty((Q, m + 1, d))
    X = np.empty((Q, m + 1, n))
    W[:, : start + 1] = w0
    X[:, : start + 1] = xs0
    gid = np.zeros((Q, 1), dtype=np.int64)
    level_size = 1  # global nodes per query at the current level
    dBs = []
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(K):
            j = start + k
            b = int(schedule[k])
            if k == 0:
                children = np.broadcast_to(np.asarray(roots, dtype=np.int64), (Q, R))
                rep = R
            else:
                children = (gid[:, :, None] * b + np.arange(b)).reshape(Q, -1)
                rep = b
            level_size *= b
            if rep > 1:
                W = np.repeat(W, rep, axis=0)
                X = np.repeat(X, rep, axis=0)
            gid = children
            idx = gid if crn else gid + np.asarray(qids, dtype=np.int64)[:, None] * level_size
            inc = sq * rng.normals(seed, stream, idx.ravel(), k, d)
            th = times[: j + 1]
            drift = model.drift(th, W[:, : j + 1], X[:, : j + 1])
            vol = model.vol(th, W[:, : j + 1], X[:, : j + 1])
            X[:, j + 1] = X[:, j] + drift * dt + np.einsum("pnd,pd->pn", vol, inc)
            W[:, j + 1] = W[:, j] + inc
            dBs.append(inc)
    if not np.all(np.isfinite(X)):
        raise SolverError("nested simulation produced non-finite states")
    Y = model.terminal(times, W, X).astype(float)
    # backward through levels K-1 .. 1
    rows = Y.shape[0]
    for k in range(K - 1, 0, -1):
        j = start + k
        b = int(schedule[k])
        Yc = Y.reshape(-1, b)
        inc = dBs[k].reshape(-1, b, d)
        ybar = _smean(Yc, axis=1)
        if model.driver_zero:
            Y = ybar
            continue
        z = np.mean((Yc - ybar[:, None])[:, :, None] * inc, axis=1) / dt
        leaf_block = rows // len(ybar)
        sel = slice(None, None, leaf_block)
        th, wh, xh = times[: j + 1], W[sel, : j + 1], X[sel, : j + 1]
        y = ybar
        for _ in range(picard):
            y = ybar + model.driver(th, wh, xh, y, z) * dt
        Y = y
    return Y.reshape(Q, R), dBs[0].reshape(Q, R, d)


def nested_values(
    model: Model,
    grid: TimeGrid,
    start: int,
    w0: np.ndarray,
    xs0: np.ndarray,
    *,
    branching=None,
    roots: int = 4096,
    seed: int = 0,
    stream: int = rng.NESTED,
    crn: bool = True,
    qids=None,
    picard: int = 1,
    budget: int = DEFAULT_BUDGET,
    threads: int = 1,
):
    """Nested estimates for ``Q`` queries sharing the start node.

    ``w0 (Q, start+1, d)``/``xs0 (Q, start+1, n)`` are the conditioning histories. With
    ``crn`` all queries reuse one tree of increments; otherwise ``qids`` select independent trees.
    Returns ``(values (Q,), stderrs (Q,), samples (Q, b0))``.
    """
    w0 = np.asarray(w0, dtype=float)
    xs0 = np.asarray(xs0, dtype=float)
    Q = w0.shape[0]
    times = grid.nodes
    if start == grid.m:
        w = np.concatenate([w0], axis=1)
        vals = model.terminal(times, w, xs0).astype(float)
        return vals, np.zeros(Q), vals[:, None].copy()
    K = grid.m - start
    if branching is None:
        schedule = default_branching(model, K, roots)
    elif np.isscalar(branching):
        schedule = (int(branching),) * K
    else:
        schedule = tuple(int(b) for b in branching)
    if len(schedule) != K:
        raise ValueError(f"branching schedule has {len(schedule)} levels, need {K}")
    if min(schedule) < 1 or schedule[0] < 2:
        raise ValueError("branching must be >= 1 per level and >= 2 at the root")
    cost = nested_cost(schedule, Q)
    if cost > budget:
        raise BudgetError(f"nested tree needs {cost} nodes, budget is {budget}")
    qids = np.arange(Q) if qids is None else np.asarray(qids, dtype=np.int64)
    b0 = schedule[0]
    below = int(np.prod(schedule[1:], dtype=np.int64)) if K > 1 else 1
    per_query = b0 * below
    qb = max(1, min(Q, CHUNK_ROWS // per_query))
    rb = max(1, min(b0, CHUNK_ROWS // (qb * below)))
    jobs = [(q0, r0) for q0 in range(0, Q, qb) for r0 in range(0, b0, rb)]

    def run(job):
        q0, r0 = job
        qs = slice(q0, min(Q, q0 + qb))
        return _tree_chunk(
            model, grid, start, w0[qs], xs0[qs], schedule, seed, stream, crn, qids[qs],
            np.arange(r0, min(b0, r0 + rb)), picard,
        )

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    Y1 = np.empty((Q, b0))
    dB0 = np.empty((Q, b0, model.d))
    for (q0, r0), (y, db) in zip(jobs, parts):
        Y1[q0 : q0 + y.shape[0], r0 : r0 + y.shape[1]] = y
        dB0[q0 : q0 + y.shape[0], r0 : r0 + y.shape[1]] = db
    ybar = _smean(Y1, axis=1)
    if model.driver_zero:
        c = Y1
    else:
        z = np.mean((Y1 - ybar[:, None])[:, :, None] * dB0, axis=1) / grid.dt
        th = times[: start + 1]
        y = ybar
        for _ in range(picard):
            y = ybar + model.driver(th, w0, xs0, y, z) * grid.dt
        c = Y1 + (model.driver(th, w0, xs0, y, z) * grid.dt)[:, None]
    vals = _smean(c, axis=1)
    se = _sstd(c, axis=1, ddof=1) / np.sqrt(b0)
    return vals, se, c


def solve_backward_nested(
    model: Model,
    t: float,
    omega: Path | None,
    x,
    *,
    grid: TimeGrid | None = None,
    branching=None,
    roots: int = 4096,
    seed: int = 0,
    x_path: Path | None = None,
    picard: int = 1,
    budget: int = DEFAULT_BUDGET,
    threads: int = 1,
) -> NestedEstimate:
    """Nested conditional-expectation estimate of ``v(t, omega, x)``."""
    grid = grid or (omega.grid if omega is not None else None)
    if grid is None:
        raise GridError("pass a grid or a conditioning path")
    i = grid.index(t)
    w0, xs0 = conditioning_arrays(model, grid, i, omega, x, x_path)
    if i == grid.m:
        w0 = omega.values if omega is not None else np.zeros((grid.m + 1, model.d))
    v, se, c = nested_values(
        model, grid, i, w0[None], xs0[None], branching=branching, roots=roots, seed=seed,
        picard=picard, budget=budget, threads=threads,
    )
    return NestedEstimate(float(v[0]), float(se[0]), c[0])


# ---------------------------------------------------------------- value queries


@dataclass(frozen=True)
class ValueQuery:
    t: float
    omega: Path
    x: np.ndarray
    x_path: Path | None = None

    def __post_init__(self):
        self.omega.grid.index(self.t)
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))


@dataclass(frozen=True)
class SolverConfig:
    seed: int = 0
    N: int = 20_000  # forward paths (lsmc) or root branches (nested)
    branching: tuple | None = None
    picard: int | None = None
    features: str | None = None
    budget: int = DEFAULT_BUDGET
    threads: int = 1


def terminal_value(model: Model, omega: Path, x, x_path: Path | None = None) -> float:
    g = omega.grid
    w0, xs0 = conditioning_arrays(model, g, g.m, omega, x, x_path)
    return float(model.terminal(g.nodes, omega.values[None], xs0[None])[0])


def value_estimate(model: Model, q: ValueQuery, method: str = "nested", config: SolverConfig | None = None):
    """``(value, stderr)`` of ``v(t, omega, x)``."""
    cfg = config or SolverConfig()
    grid = q.omega.grid
    if grid.index(q.t) == grid.m:
        return terminal_value(model, q.omega, q.x, q.x_path), 0.0
    if method == "nested":
        est = solve_backward_nested(
            model, q.t, q.omega, q.x, branching=cfg.branching, roots=cfg.N, seed=cfg.seed,
            x_path=q.x_path, picard=cfg.picard or 1, budget=cfg.budget, threads=cfg.threads,
        )
        return est.value, est.stderr
    if method == "lsmc":
        ens = simulate_forward(model, q.t, q.omega, q.x, cfg.N, cfg.seed, x_path=q.x_path)
        sol = solve_backward_lsmc(model, ens, cfg.features, cfg.picard or 3)
        return sol.v0, sol.stderr
    raise ValueError(f"unknown method {method!r}; use 'lsmc' or 'nested'")


def value(model: Model, q: ValueQuery, method: str = "nested", config: SolverConfig | None = None) -> float:
    """``v(t, omega, x)``; deterministic given the configured seed."""
    return value_estimate(model, q, method, config)[0]


def value_enlarged(model: Model, t: float, omega_dn: Path, method: str = "nested", config: SolverConfig | None = None) -> float:
    """Lift on the ``(d+n)``-dimensional path space: ``v(t, omega^d, omega^n_t)``.

    For models whose coefficients read the state path, the ``omega^n`` history up to ``t``
    is passed on as that path.
    """
    if omega_dn.dim != model.d + model.n:
        raise GridError(f"enlarged path has dimension {omega_dn.dim}, expected {model.d + model.n}")
    wd, wn = omega_dn.split(model.d)
    x = wn.at(t)
    xp = wn if model.reads_x_path else None
    return value(model, ValueQuery(t, wd, x, xp), method, config)


# ---------------------------------------------------------------- value field


class ValueField:
    """Batched nested evaluation of ``v`` at arbitrary (node, history) queries.

    Identical queries are evaluated once. Terminal queries return ``g`` exactly.
    """

    def __init__(self, model: Model, grid: TimeGrid, roots: int = 4096, seed: int = 0, crn: bool = True,
                 stream: int = rng.NESTED, branching=None, picard: int = 1, budget: int = DEFAULT_BUDGET, threads: int = 1):
        self.model, self.grid = model, grid
        self.kw = dict(roots=roots, seed=seed, crn=crn, stream=stream, branching=branching,
                       picard=picard, budget=budget, threads=threads)

    def _key(self, node, w, xs):
        m = self.model
        if m.markov:
            return xs[-1].tobytes()
        parts = [w.tobytes()]
        parts.append(xs.tobytes() if m.reads_x_path else xs[-1].tobytes())
        return b"|".join(parts)

    def evaluate(self, node: int, W: np.ndarray, X: np.ndarray, qids=None, samples: bool = True):
        """Values at ``node`` for histories ``W (Q, node+1, d)``, ``X (Q, node+1, n)``.

        Returns ``(values, stderrs, samples)`` aligned with the input rows (``samples`` is
        ``None`` when not requested).
        """
        Q = W.shape[0]
        qids = np.arange(Q) if qids is None else np.asarray(qids)
        keys = [self._key(node, W[q], X[q]) for q in range(Q)]
        first: dict = {}
        for q, k in enumerate(keys):
            first.setdefault(k, q)
        uniq = np.array(sorted(first.values()))
        if node == self.grid.m:
            v = self.model.terminal(self.grid.nodes, W[uniq], X[uniq]).astype(float)
            se, c = np.zeros(len(uniq)), v[:, None]
        else:
            v, se, c = nested_values(self.model, self.grid, node, W[uniq], X[uniq], qids=qids[uniq], **self.kw)
        pos = {int(u): r for r, u in enumerate(uniq)}
        back = np.array([pos[first[k]] for k in keys])
        return v[back], se[back], (c[back] if samples else None)


# ---------------------------------------------------------------- dynamic programming


@dataclass(frozen=True)
class StoppingRule:
    """Fixed node (``kind="fixed"``, ``time``) or ``eps``-ball exit of the driving path."""

    kind: str = "fixed"
    time: float | None = None
    eps: float | None = None
    capped: bool = True

    def nodes(self, grid: TimeGrid, start: int, B: np.ndarray) -> np.ndarray:
        N = B.shape[0]
        if self.kind == "fixed":
            j = grid.index(self.time)
            if j < start:
                raise GridError("stopping time lies before the start")
            return np.full(N, j)
        if self.kind == "hitting":
            if not (self.eps and self.eps > 0):
                raise ValueError("hitting rule needs eps > 0")
            cap = cap_node(grid, start, self.eps, self.capped)
            # B is local (starts at the start node)
            return start + hitting_node(B, 0, self.eps, cap - start)
        raise ValueError(f"unknown stopping rule {self.kind!r}")


@dataclass(frozen=True)
class DPPResult:
    mean: float
    stderr: float
    v0: float
    v0_stderr: float
    stopped_mean: float
    tau_nodes: np.ndarray = field(repr=False)


def dpp_residual(
    model: Model,
    grid: TimeGrid,
    tau: StoppingRule,
    N: int,
    seed: int,
    *,
    t: float = 0.0,
    omega: Path | None = None,
    x=None,
    inner_roots: int = 8,
    root_roots: int | None = None,
    threads: int = 1,
) -> DPPResult:
    """Monte Carlo estimate of ``E[v(tau, .) + sum_{i<tau} f_i dt] - v(t, omega, x)``.

    The stochastic integral has zero mean and is dropped. ``v`` at ``tau`` comes from
    independent nested trees per outer path; ``Y``/``Z`` inside the driver sum come from the
    regression solver on the outer ensemble.
    """
    x = np.zeros(model.n) if x is None else x
    omega = omega if omega is not None else Path.zeros(grid, model.d)
    start = grid.index(t)
    ens = simulate_forward(model, t, omega, x, N, seed, stream=rng.DPP_OUTER)
    if len(ens.aborted):
        raise SolverError("outer simulation aborted")
    taus = tau.nodes(grid, start, ens.B)
    vt = np.empty(N)
    field_ = ValueField(model, grid, roots=inner_roots, seed=seed, crn=False, stream=rng.NESTED, threads=threads)
    for j in np.unique(taus):
        sel = np.flatnonzero(taus == j)
        v, _, _ = field_.evaluate(int(j), ens.W[sel, : j + 1], ens.X[sel, : j + 1], qids=sel, samples=False)
        vt[sel] = v
    F = np.zeros(N)
    if not model.driver_zero:
        sol = solve_backward_lsmc(model, ens)
        th = grid.nodes
        for k in range(grid.m - start):
            j = start + k
            live = taus > j
            if not live.any():
                continue
            f = model.driver(th[: j + 1], ens.W[live, : j + 1], ens.X[live, : j + 1], sol.Y[live, k], sol.Z[live, k])
            F[live] += f * grid.dt
    terms = vt + F
    w0, xs0 = conditioning_arrays(model, grid, start, omega, x)
    rr = root_roots or 4 * N
    v0, se0, _ = nested_values(model, grid, start, w0[None], xs0[None], roots=rr, seed=seed, stream=rng.DPP_ROOT, threads=threads)
    v0, se0 = float(v0[0]), float(se0[0])
    diff = terms - v0
    mean = float(_smean(diff))
    se_outer = float(_sstd(terms, ddof=1) / np.sqrt(N))
    return DPPResult(mean, float(np.hypot(se_outer, se0)), v0, se0, float(_smean(terms)), taus)


class LiftedField:
    """``v_hat(t, omega^{d+n})`` as a batched functional ``(times, H) -> values``.

    ``H (Q, i+1, d+n)`` stacks the driving path and the state path. Evaluations share one
    tree of increments (common random numbers), so bumped queries can be differenced.
    """

    def __init__(self, model: Model, grid: TimeGrid, roots: int = 4096, seed: int = 0, **kw):
        self.model, self.grid = model, grid
        self.k = model.d + model.n
        self._field = ValueField(model, grid, roots=roots, seed=seed, crn=True, **kw)

    def samples(self, times, H) -> np.ndarray:
        H = np.asarray(H, dtype=float)
        node = len(times) - 1
        d = self.model.d
        _, _, c = self._field.evaluate(node, H[..., :d], H[..., d:])
        return c

    def estimate(self, times, H):
        """``(values, stderrs)`` without materializing per-root samples."""
        H = np.asarray(H, dtype=float)
        d = self.model.d
        v, se, _ = self._field.evaluate(len(times) - 1, H[..., :d], H[..., d:], samples=False)
        return v, se

    def __call__(self, times, H) -> np.ndarray:
        return self.estimate(times, H)[0]
