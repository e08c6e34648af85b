"""Catalog of FBSDE coefficient quadruples ``(b, sigma, f, g)`` and their regularity audit.

Coefficients are batched and non-anticipative by construction: at grid node ``i`` they
receive only the history view ``times[: i + 1]``, ``w[:, : i + 1]`` (the driving path) and
``xs[:, : i + 1]`` (the forward state history; the current state is ``xs[:, -1]``).

=========  ======================================================
drift      ``(times, w, xs) -> (N, n)``
vol        ``(times, w, xs) -> (N, n, d)``
driver     ``(times, w, xs, y, z) -> (N,)`` with ``y: (N,)``, ``z: (N, d)``
terminal   ``(times, w, xs) -> (N,)`` on the full horizon
=========  ======================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ppdelab import quadrature, rng
from ppdelab.paths import TimeGrid

CATALOG = (
    "zero",
    "bm",
    "linear_driver",
    "degenerate_integrator",
    "path_drift",
    "lookback",
    "remark42",
)


@dataclass(frozen=True)
class Modulus:
    """Concave modulus of continuity ``kappa * sqrt(r)`` or ``kappa * r``."""

    kind: str = "linear"
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sqrt", "linear"):
            raise ValueError(f"unknown modulus family {self.kind!r}")
        if not self.kappa > 0:
            raise ValueError("modulus scale must be positive")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.kappa * (np.sqrt(r) if self.kind == "sqrt" else r)


@dataclass(frozen=True)
class Model:
    name: str
    d: int
    n: int
    drift: Callable
    vol: Callable
    driver: Callable
    terminal: Callable
    lipschitz: float
    modulus: Modulus
    params: dict = field(default_factory=dict)
    sup_g: float = 1.0
    sup_f: float | None = 0.0
    bounded: bool = True
    notes: str = ""
    markov: bool = True  # b, sigma, f, g read only the current state
    reads_x_path: bool = False
    driver_zero: bool = True
    driver_linear: bool = True  # affine in y and independent of z
    features: str = "x2"
    reference: Callable | None = None  # reference(t, T, x) for Markov entries

    def value_bound(self, T: float) -> float:
        """``sup|g| + T sup|f|``; for the linear driver ``e^{|c| T} sup|g|``."""
        if self.sup_f is not None:
            return self.sup_g + T * self.sup_f
        c = abs(self.params.get("c", 0.0))
        return float(np.exp(c * T) * self.sup_g)


def _current(xs):
    return xs[:, -1, :]


def _zeros_drift(n):
    return lambda times, w, xs: np.zeros((xs.shape[0], n))


def _zero_driver(times, w, xs, y, z):
    return np.zeros(xs.shape[0])


def _const_vol(mat):
    mat = np.asarray(mat, dtype=float)

    def vol(times, w, xs):
        return np.broadcast_to(mat, (xs.shape[0],) + mat.shape)

    return vol


def _tanh_terminal(offset=0.0, coord=0):
    def g(times, w, xs):
        return np.tanh(xs[:, -1, coord]) + offset

    return g


def _running_max(w):
    return np.max(w[..., 0], axis=1)


def _bm_reference(offset=0.0, c=0.0):
    def ref(t, T, x):
        tau = T - t
        v = quadrature.heat_tanh(tau, float(np.ravel(x)[0]))[0]
        return float(np.exp(c * tau) * (v + offset))

    return ref


def _degenerate_reference(t, T, x):
    x = np.ravel(x)
    return quadrature.integrated_bm_tanh(T - t, x[0], x[1])


def _check_params(name, params, allowed):
    unknown = set(params) - set(allowed)
    if unknown:
        raise ValueError(f"model {name!r} has no parameter(s) {sorted(unknown)}")
    out = {}
    for key, (default, lo, hi) in allowed.items():
        v = float(params.get(key, default))
        if not (lo <= v <= hi):
            raise ValueError(f"parameter {key}={v} of model {name!r} outside [{lo}, {hi}]")
        out[key] = v
    return out


def get_model(name: str, params: dict | None = None) -> Model:
    """Build a catalog model by name."""
    params = dict(params or {})
    if name == "zero":
        p = _check_params(name, params, {})
        return Model(
            name, 1, 1, _zeros_drift(1), _const_vol([[0.0]]), _zero_driver, _tanh_terminal(),
            lipschitz=1.0, modulus=Modulus("linear"), params=p, features="x1",
            reference=lambda t, T, x: float(np.tanh(np.ravel(x)[0])),
        )
    if name == "bm":
        p = _check_params(name, params, {})
        return Model(
            name, 1, 1, _zeros_drift(1), _const_vol([[1.0]]), _zero_driver, _tanh_terminal(),
            lipschitz=1.0, modulus=Modulus("linear"), params=p, reference=_bm_reference(),
        )
    if name == "linear_driver":
        p = _check_params(name, params, {"c": (0.5, -5.0, 5.0), "offset": (0.0, -5.0, 5.0)})
        c, off = p["c"], p["offset"]

        def driver(times, w, xs, y, z):
            return c * y

        return Model(
            name, 1, 1, _zeros_drift(1), _const_vol([[1.0]]), driver, _tanh_terminal(off),
            lipschitz=max(1.0, abs(c)), modulus=Modulus("linear"), params=p,
            sup_g=1.0 + abs(off), sup_f=None, bounded=False, driver_zero=c == 0.0,
            notes="f = c*y is unbounded in y; kept as a closed-form reference",
            reference=_bm_reference(off, c),
        )
    if name == "degenerate_integrator":
        p = _check_params(name, params, {})

        def drift(times, w, xs):
            x = _current(xs)
            return np.stack([np.zeros(len(x)), x[:, 0]], axis=1)

        return Model(
            name, 1, 2, drift, _const_vol([[1.0], [0.0]]), _zero_driver, _tanh_terminal(coord=1),
            lipschitz=1.0, modulus=Modulus("linear"), params=p, bounded=False,
            notes="non-square, degenerate sigma = (1, 0)^T; drift x1 is unbounded",
            reference=_degenerate_reference,
        )
    if name == "path_drift":
        p = _check_params(name, params, {"a": (0.5, 0.0, 5.0)})
        a = p["a"]

        def drift(times, w, xs):
            return (a * np.tanh(_running_max(w)))[:, None]

        return Model(
            name, 1, 1, drift, _const_vol([[1.0]]), _zero_driver, _tanh_terminal(),
            lipschitz=max(1.0, np.sqrt(2.0) * a), modulus=Modulus("sqrt"), params=p,
            markov=False, features="path2",
        )
    if name == "lookback":
        p = _check_params(name, params, {})

        def g(times, w, xs):
            return np.tanh(_running_max(w))

        return Model(
            name, 1, 1, _zeros_drift(1), _const_vol([[1.0]]), _zero_driver, g,
            lipschitz=np.sqrt(2.0), modulus=Modulus("sqrt"), params=p,
            markov=False, features="lookback2",
        )
    if name == "remark42":
        p = _check_params(name, params, {"a": (0.5, 0.0, 5.0), "s": (1.0, 0.05, 5.0)})
        a, s = p["a"], p["s"]

        def drift(times, w, xs):
            x = xs[..., 0]
            return (a * np.tanh(np.max(x, axis=1) - x[:, -1]))[:, None]

        def g(times, w, xs):
            x = xs[..., 0]
            dt = np.diff(times)
            area = np.sum(x[:, :-1] * dt, axis=1) / (times[-1] - times[0])
            return np.tanh(area)

        return Model(
            name, 1, 1, drift, _const_vol([[s]]), _zero_driver, g,
            lipschitz=max(np.sqrt(2.0), np.sqrt(2.0) * a, 1.0), modulus=Modulus("sqrt"), params=p,
            markov=False, reads_x_path=True, features="xpath2",
            notes="coefficients read the forward-state path instead of the driving path",
        )
    raise ValueError(f"unknown model {name!r}; catalog: {', '.join(CATALOG)}")


@dataclass(frozen=True)
class AssumptionReport:
    """Largest observed ratios; ``combined`` is checked against the declared constant."""

    model: str
    seed: int
    budget: int
    lipschitz_x: float
    lipschitz_y: float
    lipschitz_z: float
    modulus_ratio: dict
    combined_ratio: dict
    sup: dict
    declared_c: float
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def _walks(seed, stream, n_paths, nodes, dim, dt):
    z = rng.normals(seed, stream, np.arange(n_paths), 0, (nodes - 1) * dim)
    out = np.zeros((n_paths, nodes, dim))
    out[:, 1:] = np.cumsum(np.sqrt(dt) * z.reshape(n_paths, nodes - 1, dim), axis=1)
    return out


def _clamp_rows(v, idx):
    """Clamp each row of ``v`` (shape ``(N, nodes, k)``) at its own node ``idx``."""
    nodes = np.arange(v.shape[1])
    frozen = v[np.arange(v.shape[0]), idx][:, None, :]
    return np.where((nodes[None, :] > idx[:, None])[..., None], frozen, v)


def _sup_dist(a, b):
    return np.max(np.linalg.norm(a - b, axis=2), axis=1)


class _Sample:
    """One side of a pair of coefficient inputs, with vectorized evaluation."""

    def __init__(self, model, times, node, w, xh, y, z):
        self.model, self.times, self.node = model, times, node
        self.w, self.xh, self.y, self.z = w, xh, y, z

    def coefficients(self):
        m, N = self.model, len(self.node)
        b = np.zeros((N, m.n))
        s = np.zeros((N, m.n, m.d))
        f = np.zeros(N)
        for i in np.unique(self.node):
            sel = self.node == i
            th, wh = self.times[: i + 1], self.w[sel, : i + 1]
            if m.reads_x_path:
                xx = self.xh[sel, : i + 1]
            else:
                xx = np.repeat(self.xh[sel, i : i + 1], i + 1, axis=1)
            b[sel] = m.drift(th, wh, xx)
            s[sel] = m.vol(th, wh, xx)
            f[sel] = m.driver(th, wh, xx, self.y[sel], self.z[sel])
        return b, s, f

    def terminal(self):
        xh = self.xh if self.model.reads_x_path else np.repeat(self.xh[:, -1:], self.xh.shape[1], axis=1)
        return self.model.terminal(self.times, self.w, xh)

    def x_now(self):
        return self.xh[np.arange(len(self.node)), self.node]

    def path_view(self):
        """Clamped path the coefficients may read (the forward-state path for X-path models)."""
        src = self.xh if self.model.reads_x_path else self.w
        return _clamp_rows(src, self.node)

    def terminal_path(self):
        return self.xh if self.model.reads_x_path else self.w


def check_assumptions(model: Model, budget: int = 10_000, seed: int = 0, T: float = 1.0, m: int = 16) -> AssumptionReport:
    """Empirical audit of the Lipschitz/modulus bounds declared for ``model``.

    Four perturbation experiments of ``budget`` pairs each: x only, y/z only, (t, omega)
    only, and everything at once. Perturbation scales span four decades so that near pairs
    are represented. Only the combined experiment is compared with the declared constant
    (flagged when exceeded by more than 5 percent); the others are diagnostics.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    grid = TimeGrid(0.0, T, m)
    times = grid.nodes
    d, n, N = model.d, model.n, int(budget)
    rho = model.modulus
    u = rng.uniforms(seed, rng.AUDIT, np.arange(4 * N, dtype=np.uint64)).reshape(4, N)
    scale = 10.0 ** (-4.0 * u[0])
    scale[u[1] < 0.2] = 1.0
    stream = iter(range(rng.AUDIT * 1000, rng.AUDIT * 1000 + 100))

    def normals(dim):
        return rng.normals(seed, next(stream), np.arange(N), 0, dim)

    node = np.minimum((u[2] * (m + 1)).astype(int), m)
    base = _Sample(
        model, times, node,
        _walks(seed, next(stream), N, m + 1, d, grid.dt),
        _walks(seed, next(stream), N, m + 1, n, grid.dt) + 2.0 * normals(n)[:, None, :],
        2.0 * normals(1)[:, 0], normals(d),
    )

    def perturbed(dt_nodes=False, path=False, x=False, yz=False):
        nd = node
        if dt_nodes:
            nd = np.clip(node + np.round(scale * (u[3] - 0.5) * m).astype(int), 0, m)
        w, xh = base.w, base.xh
        if path:
            w = w + scale[:, None, None] * _walks(seed, next(stream), N, m + 1, d, grid.dt)
            if model.reads_x_path:
                xh = xh + scale[:, None, None] * _walks(seed, next(stream), N, m + 1, n, grid.dt)
        if x:
            xh = xh + scale[:, None, None] * normals(n)[:, None, :]
        y, z = base.y, base.z
        if yz:
            y = y + scale * normals(1)[:, 0]
            z = z + scale[:, None] * normals(d)
        return _Sample(model, times, nd, w, xh, y, z)

    def ratio(num, den):
        ok = den > 1e-300
        return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0

    def deltas(p, q):
        b1, s1, f1 = p.coefficients()
        b2, s2, f2 = q.coefficients()
        return (
            np.linalg.norm(b1 - b2, axis=1),
            np.linalg.norm((s1 - s2).reshape(N, -1), axis=1),
            np.abs(f1 - f2),
            np.abs(p.terminal() - q.terminal()),
        )

    def distances(p, q):
        d_path = np.abs(times[p.node] - times[q.node]) + _sup_dist(p.path_view(), q.path_view())
        d_term = _sup_dist(p.terminal_path(), q.terminal_path())
        if model.reads_x_path:
            zero = np.zeros(N)
            return d_path, zero, d_term, zero
        dx = np.linalg.norm(p.x_now() - q.x_now(), axis=1)
        dxT = np.linalg.norm(p.xh[:, -1] - q.xh[:, -1], axis=1)
        return d_path, dx, d_term, dxT

    # x only
    lx = 0.0
    if not model.reads_x_path:
        q = perturbed(x=True)
        db, ds, df, dg = deltas(base, q)
        _, dx, _, dxT = distances(base, q)
        lx = max(ratio(db, dx), ratio(ds, dx), ratio(df, dx), ratio(dg, dxT))
    # y and z only
    q = perturbed(yz=True)
    _, _, df, _ = deltas(base, q)
    ly = ratio(df, np.abs(base.y - q.y) + np.linalg.norm(base.z - q.z, axis=1))
    lz = ly
    # (t, omega) only
    q = perturbed(dt_nodes=True, path=True)
    db, ds, df, dg = deltas(base, q)
    d_path, dx, d_term, dxT = distances(base, q)
    modulus = {
        "b": ratio(db, rho(d_path) + dx),
        "sigma": ratio(ds, rho(d_path) + dx),
        "f": ratio(df, rho(d_path) + dx),
        "g": ratio(dg, rho(d_term) + dxT),
    }
    # everything
    q = perturbed(dt_nodes=True, path=True, x=True, yz=True)
    db, ds, df, dg = deltas(base, q)
    d_path, dx, d_term, dxT = distances(base, q)
    dyz = np.abs(base.y - q.y) + np.linalg.norm(base.z - q.z, axis=1)
    combined = {
        "b": ratio(db, rho(d_path) + dx),
        "sigma": ratio(ds, rho(d_path) + dx),
        "f": ratio(df, rho(d_path) + dx + dyz),
        "g": ratio(dg, rho(d_term) + dxT),
    }
    b1, s1, f1 = base.coefficients()
    sup = {
        "b": float(np.max(np.linalg.norm(b1, axis=1))),
        "sigma": float(np.max(np.linalg.norm(s1.reshape(N, -1), axis=1))),
        "f": float(np.max(np.abs(f1))),
        "g": float(np.max(np.abs(base.terminal()))),
    }
    viol = tuple(sorted(k for k, v in combined.items() if v > 1.05 * model.lipschitz))
    return AssumptionReport(
        model=model.name, seed=int(seed), budget=N, lipschitz_x=lx, lipschitz_y=ly, lipschitz_z=lz,
        modulus_ratio=modulus, combined_ratio=combined, sup=sup, declared_c=float(model.lipschitz),
        violations=viol,
    )
