"""Finite-control lattices for nonlinear expectations, Snell envelopes and viscosity tests.

Every control ``(a, beta)`` (drift vector, diagonal symmetric volatility) moves the canonical
process on one shared trinomial stencil ``{-h, 0, h}^k``; only the branch probabilities depend
on the control. Per coordinate the weights are upwind moment matches,
``p_+ = (s^2 dt / 2 + max(a, 0) dt h) / h^2`` and ``p_- = (s^2 dt / 2 + max(-a, 0) dt h) / h^2``,
so the conditional mean is exactly ``a dt``. The step ``h`` solves ``h^2 = L dt h + s_max^2 dt``,
which keeps every ``p_0`` non-negative.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from ppdelab.errors import BudgetError, GridError, SolverError
from ppdelab.models import Model
from ppdelab.paths import Path, TimeGrid

DEFAULT_BUDGET = 20_000_000


@dataclass(frozen=True)
class ControlLattice:
    k: int
    m: int
    L: float
    T: float = 1.0
    t0: float = 0.0
    drifts: np.ndarray = field(default=None, repr=False)  # (na, k)
    vols: np.ndarray = field(default=None, repr=False)  # (nb, k) diagonals of beta

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise GridError("lattice needs k >= 1 and m >= 1")
        if not self.L > 0 or not self.T > 0:
            raise ValueError("control bound and horizon must be positive")
        if self.drifts is None:
            A = [np.zeros(self.k)]
            for j in range(self.k):
                for s in (1.0, -1.0):
                    e = np.zeros(self.k)
                    e[j] = s * self.L
                    A.append(e)
            object.__setattr__(self, "drifts", np.array(A))
        if self.vols is None:
            c = self.L / np.sqrt(self.k)
            B = [np.zeros(self.k), np.full(self.k, c / 2), np.full(self.k, c)]
            if self.L >= np.sqrt(self.k) and c != 1.0:
                B.append(np.ones(self.k))
            object.__setattr__(self, "vols", np.array(B))
        A, B = np.asarray(self.drifts, float), np.asarray(self.vols, float)
        if np.any(np.linalg.norm(A, axis=1) > self.L * (1 + 1e-12)):
            raise ValueError("drift control outside the L-ball")
        if np.any(np.linalg.norm(B, axis=1) > self.L * (1 + 1e-12)):
            raise ValueError("volatility control outside the Frobenius L-ball")
        if np.any(B < 0):
            raise ValueError("diagonal volatility entries must be non-negative")

    @property
    def dt(self) -> float:
        return self.T / self.m

    @property
    def q(self) -> int:
        return 3**self.k

    @property
    def h(self) -> float:
        smax = float(np.max(self.vols)) if len(self.vols) else 0.0
        dt, L = self.dt, self.L
        return 0.5 * (L * dt + np.sqrt((L * dt) ** 2 + 4 * smax**2 * dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.m + 1)

    @property
    def controls(self) -> list:
        return [(a, b) for a in self.drifts for b in self.vols]

    @property
    def has_wiener(self) -> bool:
        return bool(np.any(np.all(self.vols == 1.0, axis=1)))

    def cost(self) -> int:
        """Child-weight evaluations in the DP: ``|A| |B| sum_{i=1..m} q^i``."""
        nodes = sum(self.q**i for i in range(1, self.m + 1))
        return len(self.drifts) * len(self.vols) * nodes

    def stencil(self) -> np.ndarray:
        """``(q, k)`` increments, coordinate-major (last coordinate varies fastest)."""
        return np.array(list(itertools.product((-1, 0, 1), repeat=self.k)), dtype=float) * self.h

    def weights(self, a, beta_diag) -> np.ndarray:
        """Branch probabilities ``(q,)`` for one control."""
        dt, h = self.dt, self.h
        per = []
        for aj, sj in zip(np.atleast_1d(a), np.atleast_1d(beta_diag)):
            pp = (0.5 * sj**2 * dt + max(aj, 0.0) * dt * h) / h**2
            pm = (0.5 * sj**2 * dt + max(-aj, 0.0) * dt * h) / h**2
            p0 = max(0.0, 1.0 - pp - pm)
            per.append((pm, p0, pp))
        w = np.array([np.prod(c) for c in itertools.product(*per)])
        return w / w.sum()

    def weight_matrix(self) -> np.ndarray:
        return np.array([self.weights(a, b) for a, b in self.controls])


def make_lattice(k: int, m: int, L: float, T: float = 1.0, t0: float = 0.0, budget: int = DEFAULT_BUDGET) -> ControlLattice:
    lat = ControlLattice(k, m, L, T, t0)
    check_budget(lat, budget)
    return lat


def check_budget(lat: ControlLattice, budget: int = DEFAULT_BUDGET) -> None:
    c = lat.cost()
    if c > budget:
        raise BudgetError(f"lattice needs {c} weighted child evaluations, budget is {budget}")


def lattice_levels(lat: ControlLattice, origin=None):
    """Yield ``(i, paths (q^i, i+1, k))`` for every level of the tree."""
    inc = lat.stencil()
    paths = np.zeros((1, 1, lat.k)) if origin is None else np.asarray(origin, float).reshape(1, 1, lat.k)
    yield 0, paths
    for i in range(1, lat.m + 1):
        parent = np.repeat(paths, lat.q, axis=0)
        last = parent[:, -1] + np.tile(inc, (paths.shape[0], 1))
        paths = np.concatenate([parent, last[:, None]], axis=1)
        yield i, paths


def _finite(v, what):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite {what} on the lattice")
    return v


@dataclass(frozen=True)
class SnellResult:
    value: float
    control: tuple | None  # optimal first-step (a, beta diagonal); None when stopping at the root
    stop: tuple = field(default=(), repr=False)  # per level boolean arrays
    kind: str = "lower"

    @property
    def stop_at_root(self) -> bool:
        return bool(self.stop[0][0]) if self.stop else False


def _children_mean(V: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Weighted child averages centered on the first child, so constants are reproduced exactly."""
    v0 = V[:, :1]
    out = (V - v0) @ W
    return v0 + out if out.ndim == 2 else v0[:, 0] + out


def _dp(lat: ControlLattice, leaf: np.ndarray, sense: str, process=None, budget=DEFAULT_BUDGET):
    check_budget(lat, budget)
    W = lat.weight_matrix()
    q = lat.q
    V = leaf
    stops = [np.ones(len(leaf), dtype=bool)] if process is not None else []
    ctrl = None
    for i in range(lat.m - 1, -1, -1):
        E = _children_mean(V.reshape(-1, q), W.T)
        idx = np.argmin(E, axis=1) if sense == "lower" else np.argmax(E, axis=1)
        cont = E[np.arange(len(E)), idx]
        if process is not None:
            Yi = process[i]
            stop = Yi <= cont if sense == "lower" else Yi >= cont
            V = np.where(stop, Yi, cont)
            stops.append(stop)
        else:
            V = cont
        if i == 0:
            ctrl = idx[0]
    a, b = lat.controls[int(ctrl)]
    return float(V[0]) + 0.0, (tuple(a.tolist()), tuple(b.tolist())), tuple(reversed(stops))


def _expectation(xi: Callable, lat: ControlLattice, sense: str, budget: int) -> SnellResult:
    check_budget(lat, budget)
    leaf = None
    for i, paths in lattice_levels(lat):
        if i == lat.m:
            leaf = _finite(xi(lat.times, paths), "terminal functional")
    v, ctrl, _ = _dp(lat, leaf, sense, budget=budget)
    return SnellResult(v, ctrl, (), sense)


def lower_expectation(xi: Callable, lat: ControlLattice, budget: int = DEFAULT_BUDGET) -> float:
    """``inf`` over lattice controls of ``E[xi(B)]``; ``xi(times, paths (P, m+1, k)) -> (P,)``."""
    return _expectation(xi, lat, "lower", budget).value


def upper_expectation(xi: Callable, lat: ControlLattice, budget: int = DEFAULT_BUDGET) -> float:
    return _expectation(xi, lat, "upper", budget).value


def fixed_control_expectation(xi: Callable, lat: ControlLattice, a, beta_diag) -> float:
    """Linear lattice expectation under one constant control."""
    w = lat.weights(a, beta_diag)
    V = None
    for i, paths in lattice_levels(lat):
        if i == lat.m:
            V = _finite(xi(lat.times, paths), "terminal functional")
    for _ in range(lat.m):
        V = _children_mean(V.reshape(-1, lat.q), w)
    return float(V[0])


def _snell(Y: Callable, lat: ControlLattice, sense: str, budget: int) -> SnellResult:
    check_budget(lat, budget)
    proc = []
    for i, paths in lattice_levels(lat):
        proc.append(_finite(Y(lat.times[: i + 1], paths), "process"))
    v, ctrl, stops = _dp(lat, proc[-1], sense, proc, budget)
    if stops[0][0]:
        ctrl = None
    return SnellResult(v, ctrl, stops, sense)


def lower_snell(Y: Callable, lat: ControlLattice, budget: int = DEFAULT_BUDGET) -> SnellResult:
    """``inf_tau`` of the lower expectation of ``Y_tau``; ``Y(times[:i+1], hist (P, i+1, k)) -> (P,)``.

    Ties between stopping and continuing resolve to stopping.
    """
    return _snell(Y, lat, "lower", budget)


def upper_snell(Y: Callable, lat: ControlLattice, budget: int = DEFAULT_BUDGET) -> SnellResult:
    return _snell(Y, lat, "upper", budget)


def shifted_process(Y: Callable, t: float, omega: Path | None):
    """``Y^{t, omega}``: evaluate ``Y`` on ``omega (x)_t`` lattice paths (lattice step = path grid step)."""
    if omega is None:
        return Y
    i = omega.grid.index(t)
    prefix = omega.values[:i]
    pt = omega.grid.nodes[:i]
    base = omega.values[i]

    def shifted(times, hist):
        P = hist.shape[0]
        H = np.concatenate([np.broadcast_to(prefix, (P,) + prefix.shape), base + hist], axis=1)
        return Y(np.concatenate([pt, times]), H)

    return shifted


# ---------------------------------------------------------------- viscosity harness


@dataclass(frozen=True)
class MembershipReport:
    root_gap: float
    envelope: float
    tol: float
    mc_bound: float
    lattice_bound: float
    upper: bool
    queries: int

    @property
    def bound(self) -> float:
        return self.tol + self.mc_bound + self.lattice_bound

    @property
    def holds(self) -> bool:
        return abs(self.root_gap) <= self.tol + self.mc_bound and abs(self.envelope) <= self.bound


def _field_eval(field_, times, H):
    if hasattr(field_, "estimate"):
        v, se = field_.estimate(times, H)
        return np.asarray(v, dtype=float), np.asarray(se, dtype=float)
    if hasattr(field_, "samples"):
        c = np.asarray(field_.samples(times, H), dtype=float)
        S = c.shape[1]
        mean = c[:, :1][:, 0] + np.mean(c - c[:, :1], axis=1)
        se = np.std(c, axis=1, ddof=1) / np.sqrt(S) if S > 1 else np.zeros(len(c))
        return mean, se
    v = np.asarray(field_(times, H), dtype=float)
    return v, np.zeros(len(v))


def test_function_membership(
    phi: Callable,
    v_hat: Callable,
    grid: TimeGrid,
    t: float,
    omega: Path,
    L: float,
    eps: float,
    m: int = 4,
    tol: float = 1e-3,
    upper: bool = False,
    confidence: float = 0.99,
) -> MembershipReport:
    """Check the test-function conditions for ``phi`` at ``(t, omega)`` against ``v_hat``.

    The envelope of ``(phi - v_hat)(s ^ H_eps, B)`` is computed on a lattice with ``m`` steps over
    ``[t, t + eps]`` (the cap of the hitting time); lattice paths are interpolated onto ``grid``,
    on which both functionals are evaluated. The Monte Carlo part of the bound is a union bound
    over all distinct queries at the given confidence; the lattice part is the change from ``m/2``
    steps (zero when ``m`` is odd or 1).
    """
    i0 = grid.index(t)
    horizon = min(eps, grid.T - t)
    r_tot = grid.index(t + horizon) - i0
    if r_tot % m:
        raise GridError(f"lattice with {m} steps does not align with the grid over [t, t+{horizon}]")

    def envelope(mm):
        lat = ControlLattice(omega.dim, mm, L, horizon, t)
        r = r_tot // mm
        seen_se = []

        def Y(times, hist):
            P, n_i, k = hist.shape
            j = n_i - 1
            # interpolate lattice nodes onto the global grid, then stop at the exit of the eps-ball
            fine = np.empty((P, j * r + 1, k))
            for s in range(j):
                lam = (np.arange(r) / r)[None, :, None]
                fine[:, s * r : (s + 1) * r] = hist[:, s : s + 1] * (1 - lam) + hist[:, s + 1 : s + 2] * lam
            fine[:, -1] = hist[:, -1]
            dist = np.linalg.norm(hist[:, :, :omega.dim], axis=2)
            hit = dist >= eps
            hit[:, 0] = False
            node = np.where(hit.any(axis=1), np.argmax(hit, axis=1), j)
            vals = np.empty(P)
            for lvl in np.unique(node):
                sel = np.flatnonzero(node == lvl)
                stop = lvl * r
                Hs = np.concatenate(
                    [np.broadcast_to(omega.values[:i0], (len(sel),) + omega.values[:i0].shape),
                     omega.values[i0] + fine[sel, : stop + 1]], axis=1)
                th = grid.nodes[: i0 + stop + 1]
                pv, _ = _field_eval(phi, th, Hs)
                vv, se = _field_eval(v_hat, th, Hs)
                vals[sel] = pv - vv
                seen_se.append(se)
            return vals

        res = upper_snell(Y, lat) if upper else lower_snell(Y, lat)
        ses = np.concatenate(seen_se) if seen_se else np.zeros(1)
        return res.value, ses

    env, ses = envelope(m)
    lattice_bound = 0.0
    if m % 2 == 0 and m >= 2:
        env_half, _ = envelope(m // 2)
        lattice_bound = abs(env - env_half)
    th = grid.nodes[: i0 + 1]
    H0 = omega.values[None, : i0 + 1]
    pv, _ = _field_eval(phi, th, H0)
    vv, se0 = _field_eval(v_hat, th, H0)
    n_q = len(ses) + 1
    z = NormalDist().inv_cdf(1 - (1 - confidence) / (2 * n_q))
    mc = z * float(max(np.max(ses), se0[0]))
    return MembershipReport(float(pv[0] - vv[0]), float(env), tol, mc, lattice_bound, upper, int(n_q))


test_function_membership.__test__ = False  # not a pytest test despite the name


def viscosity_inequality(phi, u_value: float, model: Model, t: float, omega_dn: Path, **bumps) -> float:
    """Left-hand side ``-d_t phi - L phi - f(., u, d_{w^d} phi + d_{w^n} phi sigma)`` at the point.

    ``u_value`` is the candidate's value at the point (it enters only through ``f``). Analytic
    derivatives of ``phi`` are used when available, otherwise finite differences.
    """
    from ppdelab import calculus

    if omega_dn.dim != model.d + model.n:
        raise GridError(f"point has dimension {omega_dn.dim}, model needs {model.d + model.n}")
    if getattr(phi, "dww", None) is not None and getattr(phi, "dt", None) is not None:
        jet = calculus.analytic_jet(phi, t, omega_dn)
    else:
        jet = calculus.pathwise_jet(phi, t, omega_dn, **bumps)
    i = omega_dn.grid.index(t)
    th = omega_dn.grid.nodes[: i + 1]
    H = omega_dn.values[None, : i + 1]
    terms = calculus._assemble(model, th, H[..., : model.d], H[..., model.d :], float(u_value), jet.dt, jet.dw, jet.dww)
    tot = float(sum(float(v) for v in terms.values()))
    if not np.isfinite(tot):
        raise SolverError(f"non-finite viscosity left-hand side: {terms}")
    return tot
