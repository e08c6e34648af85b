"""Pathwise (vertical/horizontal) derivatives, functional Ito checks and PPDE residuals.

Functionals are batched and non-anticipative: ``u(times, w)`` receives ``times[: i + 1]`` and a
history ``w (Q, i + 1, k)`` ending at the evaluation time, and returns ``(Q,)`` values.
Stochastic fields may also expose ``samples(times, w) -> (Q, S)`` (common random numbers);
derivative estimates are then formed per sample and carry a standard error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ppdelab import quadrature, rng
from ppdelab.errors import GridError, SolverError
from ppdelab.models import Model
from ppdelab.paths import Path, TimeGrid

MACHINE_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class SmoothFunctional:
    """A functional with optional analytic pathwise derivatives (all batched)."""

    name: str
    k: int
    u: Callable
    dt: Callable | None = None
    dw: Callable | None = None
    dww: Callable | None = None

    def __call__(self, times, w):
        return self.u(times, w)

    def at(self, t: float, omega: Path) -> float:
        i = omega.grid.index(t)
        return float(self.u(omega.grid.nodes[: i + 1], omega.values[None, : i + 1])[0])


@dataclass(frozen=True)
class PathwiseJet:
    value: float
    dt: float
    dw: np.ndarray
    dww: np.ndarray
    eps1: float
    eps2: float
    h: float
    stderr: dict = field(default_factory=dict)
    samples: dict | None = field(default=None, repr=False)


def _samples(u, times, H) -> np.ndarray:
    if hasattr(u, "samples"):
        return np.asarray(u.samples(times, H), dtype=float)
    return np.asarray(u(times, H), dtype=float)[:, None]


def _history(omega: Path, t: float):
    i = omega.grid.index(t)
    return i, omega.grid.nodes, omega.values[None, : i + 1].copy()


def default_bumps(x_t: np.ndarray, dt: float):
    """``(eps1, eps2, h)``: cube root / fourth root of machine epsilon scaled by ``1 + |x_t|``."""
    scale = 1.0 + float(np.linalg.norm(x_t))
    return MACHINE_EPS ** (1 / 3) * scale, MACHINE_EPS ** (1 / 4) * scale, dt


def _steps(grid: TimeGrid, h: float) -> int:
    r = h / grid.dt
    ri = int(round(r))
    if ri < 1 or abs(r - ri) > 1e-6 * max(1.0, r):
        raise GridError(f"time bump {h} is not a positive multiple of the grid step {grid.dt}")
    return ri


def _extend(H: np.ndarray, r: int) -> np.ndarray:
    return np.concatenate([H, np.repeat(H[:, -1:], r, axis=1)], axis=1)


def _time_pair(grid: TimeGrid, i: int, H: np.ndarray, r: int):
    """Histories ``(early, late)`` whose difference over ``h`` gives the horizontal derivative.

    At the horizon the left limit is used: the forward difference starting ``r`` nodes earlier.
    """
    if i + r <= grid.m:
        return (i, H), (i + r, _extend(H, r))
    if i - r < 0:
        raise GridError("time bump longer than the available history")
    base = H[:, : i - r + 1]
    return (i - r, base), (i, _extend(base, r))


def time_derivative_fd(u, t: float, omega: Path, h: float | None = None) -> float:
    """Forward difference of ``u`` along the horizontally extended (clamped) path."""
    grid = omega.grid
    h = grid.dt if h is None else h
    r = _steps(grid, h)
    i, times, H = _history(omega, t)
    (i0, H0), (i1, H1) = _time_pair(grid, i, H, r)
    a = _samples(u, times[: i0 + 1], H0)
    b = _samples(u, times[: i1 + 1], H1)
    return float(np.mean(b - a) / h)


def _bump(H: np.ndarray, j: int, e: float) -> np.ndarray:
    out = H.copy()
    out[:, -1, j] += e
    return out


def vertical_derivative_fd(u, t: float, omega: Path, eps: float | None = None) -> np.ndarray:
    """Central differences under ``omega -> omega + eps e_j 1_[t, T]``."""
    i, times, H = _history(omega, t)
    eps = default_bumps(H[0, -1], omega.grid.dt)[0] if eps is None else eps
    if not eps > 0:
        raise ValueError("bump size must be positive")
    th = times[: i + 1]
    out = np.empty(omega.dim)
    for j in range(omega.dim):
        out[j] = np.mean(_samples(u, th, _bump(H, j, eps)) - _samples(u, th, _bump(H, j, -eps))) / (2 * eps)
    return out


def second_vertical_derivative_fd(u, t: float, omega: Path, eps: float | None = None) -> np.ndarray:
    """Symmetric second vertical derivative from the standard five/four-point stencils."""
    jet = pathwise_jet(u, t, omega, eps2=eps, first=False)
    return jet.dww


def pathwise_jet(u, t: float, omega: Path, eps1: float | None = None, eps2: float | None = None,
                 h: float | None = None, first: bool = True) -> PathwiseJet:
    """Value, horizontal derivative, gradient and Hessian of ``u`` at ``(t, omega)``."""
    grid = omega.grid
    i, times, H = _history(omega, t)
    d1, d2, dh = default_bumps(H[0, -1], grid.dt)
    eps1 = d1 if eps1 is None else eps1
    eps2 = d2 if eps2 is None else eps2
    h = dh if h is None else h
    if not (eps1 > 0 and eps2 > 0):
        raise ValueError("bump sizes must be positive")
    k = omega.dim
    th = times[: i + 1]
    # all same-node queries in one batch
    qs = [H]
    for j in range(k):
        qs += [_bump(H, j, eps1), _bump(H, j, -eps1), _bump(H, j, eps2), _bump(H, j, -eps2)]
    for j in range(k):
        for l in range(j + 1, k):
            for sj in (1, -1):
                for sl in (1, -1):
                    qs.append(_bump(_bump(H, j, sj * eps2), l, sl * eps2))
    S = _samples(u, th, np.concatenate(qs, axis=0))
    base = S[0]
    dw = np.empty((k, S.shape[1]))
    dww = np.empty((k, k, S.shape[1]))
    for j in range(k):
        p1, m1, p2, m2 = S[1 + 4 * j : 5 + 4 * j]
        dw[j] = (p1 - m1) / (2 * eps1)
        dww[j, j] = (p2 - 2 * base + m2) / eps2**2
    pos = 1 + 4 * k
    for j in range(k):
        for l in range(j + 1, k):
            pp, pm, mp, mm = S[pos : pos + 4]
            pos += 4
            dww[j, l] = dww[l, j] = (pp - pm - mp + mm) / (4 * eps2**2)
    r = _steps(grid, h)
    (i0, H0), (i1, H1) = _time_pair(grid, i, H, r)
    if i0 == i:
        early = base
    else:
        early = _samples(u, times[: i0 + 1], H0)[0]
    late = _samples(u, times[: i1 + 1], H1)[0]
    dtv = (late - early) / h
    S_n = S.shape[1]

    def se(a):
        return float(np.std(a, axis=-1, ddof=1).max() / np.sqrt(S_n)) if S_n > 1 else 0.0

    stderr = {"value": se(base), "dt": se(dtv), "dw": se(dw), "dww": se(dww)}
    jet = PathwiseJet(
        float(np.mean(base)), float(np.mean(dtv)), dw.mean(axis=-1), dww.mean(axis=-1), eps1, eps2, h, stderr,
        {"value": base, "dt": dtv, "dw": dw, "dww": dww},
    )
    return jet


# ---------------------------------------------------------------- smooth catalog


def _left_riemann(times, w):
    if w.shape[1] == 1:
        return np.zeros(w.shape[0])
    return np.sum(w[:, :-1, 0] * np.diff(times), axis=1)


def _trapezoid(times, w):
    if w.shape[1] == 1:
        return np.zeros(w.shape[0])
    return np.sum(0.5 * (w[:, 1:, 0] + w[:, :-1, 0]) * np.diff(times), axis=1)


def smooth_catalog(k: int = 1, rule: str = "left") -> dict:
    """Functionals with closed-form pathwise derivatives (coordinate 0 where one is needed)."""
    integral = {"left": _left_riemann, "trapezoid": _trapezoid}[rule]

    def zeros_k(w):
        return np.zeros((w.shape[0], k))

    def zeros_kk(w):
        return np.zeros((w.shape[0], k, k))

    def e0(w, scale):
        out = zeros_k(w)
        out[:, 0] = scale
        return out

    def e00(w, scale):
        out = zeros_kk(w)
        out[:, 0, 0] = scale
        return out

    cat = {}
    cat["coordinate"] = SmoothFunctional(
        "coordinate", k, lambda t, w: w[:, -1, 0].copy(), lambda t, w: np.zeros(w.shape[0]),
        lambda t, w: e0(w, 1.0), lambda t, w: zeros_kk(w),
    )
    cat["square_minus_t"] = SmoothFunctional(
        "square_minus_t", k, lambda t, w: np.sum(w[:, -1] ** 2, axis=1) - k * t[-1],
        lambda t, w: np.full(w.shape[0], -float(k)), lambda t, w: 2.0 * w[:, -1],
        lambda t, w: np.broadcast_to(2.0 * np.eye(k), (w.shape[0], k, k)).copy(),
    )
    cat["running_integral"] = SmoothFunctional(
        "running_integral", k, integral, lambda t, w: w[:, -1, 0].copy(),
        lambda t, w: zeros_k(w), lambda t, w: zeros_kk(w),
    )
    cat["product"] = SmoothFunctional(
        "product", k, lambda t, w: w[:, -1, 0] * integral(t, w), lambda t, w: w[:, -1, 0] ** 2,
        lambda t, w: e0(w, integral(t, w)), lambda t, w: zeros_kk(w),
    )
    cat["sine"] = SmoothFunctional(
        "sine", k, lambda t, w: np.sin(w[:, -1, 0]) * (1.0 + t[-1]), lambda t, w: np.sin(w[:, -1, 0]),
        lambda t, w: e0(w, np.cos(w[:, -1, 0]) * (1.0 + t[-1])),
        lambda t, w: e00(w, -np.sin(w[:, -1, 0]) * (1.0 + t[-1])),
    )
    return cat


def bm_lifted_candidate(T: float) -> SmoothFunctional:
    """``(t, omega^{1+1}) -> E[tanh(omega^n_t + W_{T-t})]`` by quadrature, with exact derivatives."""

    def parts(t, w):
        tau = T - t[-1]
        rows = [quadrature.heat_tanh(tau, x) for x in w[:, -1, 1]]
        return np.array(rows).reshape(-1, 4)

    def u(t, w):
        return parts(t, w)[:, 0]

    def dt(t, w):
        return -parts(t, w)[:, 3]

    def dw(t, w):
        p = parts(t, w)
        out = np.zeros((w.shape[0], 2))
        out[:, 1] = p[:, 1]
        return out

    def dww(t, w):
        p = parts(t, w)
        out = np.zeros((w.shape[0], 2, 2))
        out[:, 1, 1] = p[:, 2]
        return out

    return SmoothFunctional("bm_lifted", 2, u, dt, dw, dww)


def analytic_jet(u: SmoothFunctional, t: float, omega: Path) -> PathwiseJet:
    if u.dt is None or u.dw is None or u.dww is None:
        raise ValueError(f"functional {u.name!r} has no analytic derivatives")
    i, times, H = _history(omega, t)
    th = times[: i + 1]
    return PathwiseJet(
        float(u.u(th, H)[0]), float(u.dt(th, H)[0]), np.asarray(u.dw(th, H)[0]), np.asarray(u.dww(th, H)[0]),
        0.0, 0.0, 0.0,
    )


# ---------------------------------------------------------------- functional Ito


@dataclass(frozen=True)
class ItoLevel:
    m: int
    mean: float
    stderr: float
    rms: float
    max_abs: float


@dataclass(frozen=True)
class ItoCheck:
    name: str
    levels: tuple

    @property
    def shrinking(self) -> bool:
        a, b = self.levels[0].rms, self.levels[-1].rms
        return b <= a or b < 1e-12


def _ito_residual(u: SmoothFunctional, grid: TimeGrid, B: np.ndarray, beta: np.ndarray, use_fd: bool) -> np.ndarray:
    times = grid.nodes
    N, _, k = B.shape
    dt = grid.dt
    bb = beta @ beta.T
    res = u.u(times, B) - u.u(times[:1], B[:, :1])
    for i in range(grid.m):
        th, Hh = times[: i + 1], B[:, : i + 1]
        if use_fd or u.dw is None:
            jets = [pathwise_jet(u, grid.time(i), Path(grid, B[p]), h=dt) for p in range(N)]
            ut = np.array([j.dt for j in jets])
            uw = np.array([j.dw for j in jets])
            uww = np.array([j.dww for j in jets])
        else:
            ut, uw, uww = u.dt(th, Hh), u.dw(th, Hh), u.dww(th, Hh)
        dB = B[:, i + 1] - B[:, i]
        res = res - (ut * dt + np.sum(uw * dB, axis=1) + 0.5 * np.einsum("pij,ji->p", uww, bb) * dt)
    return res


def functional_ito_check(u: SmoothFunctional, alpha, beta, grid: TimeGrid, N: int, seed: int,
                         use_fd: bool = False, refine: int = 2) -> ItoCheck:
    """Telescoped residual of the functional Ito formula under ``dB = alpha dt + beta dW``.

    Runs on ``grid`` and on its ``refine``-fold refinement with coupled increments.
    """
    k = u.k
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (k,))
    beta = np.asarray(beta, dtype=float)
    beta = beta * np.eye(k) if beta.ndim == 0 else beta.reshape(k, k)
    fine = grid.refine(refine)
    idx = np.arange(N)
    dW = np.stack([rng.normals(seed, rng.ITO, idx, j, k) for j in range(fine.m)], axis=1) * np.sqrt(fine.dt)
    levels = []
    for g, inc in ((grid, dW.reshape(N, grid.m, refine, k).sum(axis=2)), (fine, dW)):
        dB = alpha * g.dt + inc @ beta.T
        B = np.concatenate([np.zeros((N, 1, k)), np.cumsum(dB, axis=1)], axis=1)
        r = _ito_residual(u, g, B, beta, use_fd)
        levels.append(ItoLevel(g.m, float(np.mean(r)), float(np.std(r, ddof=1) / np.sqrt(N)),
                               float(np.sqrt(np.mean(r**2))), float(np.max(np.abs(r)))))
    return ItoCheck(u.name, tuple(levels))


# ---------------------------------------------------------------- PPDE residual


@dataclass(frozen=True)
class Residual:
    value: float
    stderr: float
    terms: dict
    jet: PathwiseJet = field(repr=False)


def _assemble(model: Model, times, Hd, Hn, u, dt, dw, dww):
    """Left-hand side of the path-dependent equation for one jet (arrays may carry a sample axis)."""
    d, n = model.d, model.n
    b = model.drift(times, Hd, Hn)[0]
    sig = model.vol(times, Hd, Hn)[0]
    gd, gn = dw[:d], dw[d:]
    Hdd, Hdn, Hnn = dww[:d, :d], dww[:d, d:], dww[d:, d:]
    t_dt = -dt
    t_b = -np.einsum("n,n...->...", b, gn)
    ss = sig @ sig.T
    tr = np.einsum("ab...,ba->...", Hnn, ss) + 2 * np.einsum("ab...,ba->...", Hdn, sig) + np.einsum("aa...->...", Hdd)
    t_sig = -0.5 * tr
    z = gd + np.einsum("n...,nd->d...", gn, sig)
    u_arr = np.atleast_1d(u)
    S = u_arr.shape[0]
    zz = np.asarray(z).reshape(d, -1).T
    f = model.driver(times, np.repeat(Hd, S, axis=0), np.repeat(Hn, S, axis=0), u_arr, zz)
    t_f = -f if np.ndim(u) else -f[0]
    return {"dt": t_dt, "drift": t_b, "diffusion": t_sig, "driver": t_f}


def ppde_residual(candidate, model: Model, t: float, omega_dn: Path, eps1=None, eps2=None, h=None) -> Residual:
    """Residual of the path-dependent equation on the enlarged space at ``(t, omega^{d+n})``."""
    if omega_dn.dim != model.d + model.n:
        raise GridError(f"point has dimension {omega_dn.dim}, model needs {model.d + model.n}")
    jet = pathwise_jet(candidate, t, omega_dn, eps1, eps2, h)
    return _residual_from_jet(model, t, omega_dn, jet)


def _residual_from_jet(model, t, omega_dn, jet):
    i, times, H = _history(omega_dn, t)
    th = times[: i + 1]
    Hd, Hn = H[..., : model.d], H[..., model.d :]
    for name, v in (("value", jet.value), ("time derivative", jet.dt), ("first vertical derivative", jet.dw),
                    ("second vertical derivative", jet.dww)):
        if not np.all(np.isfinite(v)):
            raise SolverError(f"non-finite {name} estimate at t={t}")
    terms = _assemble(model, th, Hd, Hn, jet.value, jet.dt, jet.dw, jet.dww)
    terms = {k: float(v) for k, v in terms.items()}
    value = float(sum(terms.values()))
    stderr = 0.0
    smp = jet.samples
    if smp is not None and smp["value"].shape[-1] > 1:
        per = _assemble(model, th, Hd, Hn, smp["value"], smp["dt"], smp["dw"], smp["dww"])
        tot = sum(per.values())
        stderr = float(np.std(tot, ddof=1) / np.sqrt(tot.shape[-1]))
    return Residual(value, stderr, terms, jet)


def analytic_ppde_residual(candidate: SmoothFunctional, model: Model, t: float, omega_dn: Path) -> Residual:
    """Same assembly with the candidate's closed-form derivatives."""
    return _residual_from_jet(model, t, omega_dn, analytic_jet(candidate, t, omega_dn))


class _MixedAdapter:
    """Turn ``u(times, w (Q,i+1,d), x (Q,n))`` into an enlarged-space functional."""

    def __init__(self, u, d):
        self.u, self.d = u, d

    def __call__(self, times, H):
        return self.u(times, H[..., : self.d], H[:, -1, self.d :])

    def samples(self, times, H):
        if hasattr(self.u, "samples"):
            return self.u.samples(times, H[..., : self.d], H[:, -1, self.d :])
        return np.asarray(self(times, H))[:, None]


def mppde_residual(candidate, model: Model, t: float, omega: Path, x, eps1=None, eps2=None, h=None) -> Residual:
    """Mixed equation: classical central differences in ``x``, pathwise ones in ``omega``.

    The state variable is carried as an extra path coordinate that is constant up to ``t``,
    so an ``x``-bump is exactly a vertical bump of that coordinate.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grid = omega.grid
    i = grid.index(t)
    xs = np.zeros((grid.m + 1, model.n))
    xs[1:] = x  # the value at node 0 must be 0; only the node-t value is read
    if i == 0:
        raise GridError("the mixed residual needs t > t0 to carry x on the path")
    point = Path(grid, np.concatenate([omega.values, xs], axis=1))
    return ppde_residual(_MixedAdapter(candidate, model.d), model, t, point, eps1, eps2, h)


@dataclass(frozen=True)
class BoundedResidual:
    residual: float
    stderr: float
    bound: float
    coarse: float
    coarse_stderr: float
    doubled: float
    terms: dict

    @property
    def within(self) -> bool:
        return abs(self.residual) <= self.bound


def restrict(path: Path, grid: TimeGrid) -> Path:
    """Restrict a path to a coarser grid whose nodes are a subset of the path's nodes."""
    r = path.grid.m // grid.m
    if r * grid.m != path.grid.m or not np.isclose(path.grid.T, grid.T):
        raise GridError("target grid is not a coarsening of the path grid")
    return Path(grid, path.values[::r])


def residual_with_bound(make_candidate: Callable, model: Model, t: float, omega_dn: Path, factor: int = 2) -> BoundedResidual:
    """Residual with an error bound from grid halving, bump doubling and Monte Carlo error.

    ``bound = |R_m - R_{m/factor}| + |R(eps, h) - R(2 eps, 2 h)| + 3 (se_m + se_{m/factor})``.
    """
    fine = omega_dn.grid
    if fine.m % factor:
        raise GridError("grid cannot be coarsened by the given factor")
    coarse = TimeGrid(fine.t0, fine.T, fine.m // factor)
    r_f = ppde_residual(make_candidate(fine), model, t, omega_dn)
    r_c = ppde_residual(make_candidate(coarse), model, t, restrict(omega_dn, coarse))
    j = r_f.jet
    r_d = ppde_residual(make_candidate(fine), model, t, omega_dn, 2 * j.eps1, 2 * j.eps2, 2 * j.h)
    bound = abs(r_f.value - r_c.value) + abs(r_f.value - r_d.value) + 3 * (r_f.stderr + r_c.stderr)
    return BoundedResidual(r_f.value, r_f.stderr, bound, r_c.value, r_c.stderr, r_d.value, r_f.terms)


def residuals_to_csv(rows, fh) -> None:
    """Rows of ``(point_id, t, BoundedResidual)``."""
    wr = csv.writer(fh)
    wr.writerow(["point", "t", "residual", "dt", "drift", "diffusion", "driver", "stderr", "bound"])
    for pid, t, r in rows:
        tm = r.terms
        wr.writerow([pid, repr(float(t)), repr(r.residual), repr(tm["dt"]), repr(tm["drift"]), repr(tm["diffusion"]),
                     repr(tm["driver"]), repr(r.stderr), repr(r.bound)])
