"""Acceptance suite: one function per criterion, each returning a deterministic report body.

Tolerances are fixed here and nowhere else. Runtime limits are checked separately from the
numeric outcome so that report bodies stay byte-identical between runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ppdelab import backward, calculus, models, nlexp, quadrature
from ppdelab.backward import SolverConfig, ValueQuery
from ppdelab.paths import Path, TimeGrid, lambda_distance, PathPoint

DEFAULT_SEED = 20240601


@dataclass
class CriterionResult:
    number: int
    name: str
    numeric_pass: bool
    metrics: dict
    runtime_s: float = 0.0
    runtime_limit_s: float | None = None

    @property
    def runtime_ok(self) -> bool:
        return self.runtime_limit_s is None or self.runtime_s < self.runtime_limit_s

    @property
    def passed(self) -> bool:
        return bool(self.numeric_pass and self.runtime_ok)

    def body(self) -> dict:
        return {"criterion": self.number, "name": self.name, "numeric_pass": bool(self.numeric_pass), "metrics": self.metrics}

    def body_json(self) -> str:
        from ppdelab.experiments import _clean

        return json.dumps(_clean(self.body()), sort_keys=True)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        lim = f" (limit {self.runtime_limit_s:g}s)" if self.runtime_limit_s else ""
        return f"[{tag}] criterion {self.number:2d}: {self.name} [{self.runtime_s:.1f}s{lim}]"


def _timed(number, name, limit, fn, *args):
    t0 = time.perf_counter()
    ok, metrics = fn(*args)
    return CriterionResult(number, name, bool(ok), metrics, time.perf_counter() - t0, limit)


def _walk(rs, grid: TimeGrid, dim: int, scale: float = 1.0) -> Path:
    v = np.zeros((grid.m + 1, dim))
    v[1:] = np.cumsum(rs.normal(0.0, scale * np.sqrt(grid.dt), (grid.m, dim)), axis=0)
    return Path(grid, v)


# ---------------------------------------------------------------- 1


def identity_model(seed):
    rs = np.random.default_rng(seed)
    model = models.get_model("zero")
    grid = TimeGrid(0.0, 1.0, 20)
    cfg = SolverConfig(seed=seed, N=256)
    worst, exact = 0.0, True
    for _ in range(20):
        t = grid.time(int(rs.integers(0, grid.m + 1)))
        x = rs.normal(0.0, 1.5, 1)
        v = backward.value(model, ValueQuery(t, _walk(rs, grid, 1), x), "nested", cfg)
        exact &= v == float(np.tanh(x[0]))
        worst = max(worst, abs(v - float(np.tanh(x[0]))))
    return exact, {"queries": 20, "max_abs_error": worst}


# ---------------------------------------------------------------- 2


def linear_driver_closed_form(seed):
    c = 0.5
    model = models.get_model("linear_driver", {"c": c, "offset": 0.5})
    grid = TimeGrid(0.0, 1.0, 50)
    out, ok = [], True
    for t, x in ((0.0, 0.0), (0.5, 0.3)):
        q = ValueQuery(t, Path.zeros(grid, 1), [x])
        v, se = backward.value_estimate(model, q, "lsmc", SolverConfig(seed=seed, N=100_000))
        ref = np.exp(c * (grid.T - t)) * (quadrature.gaussian_expectation(np.tanh, x, np.sqrt(grid.T - t), 64) + 0.5)
        z = abs(v - ref) / se
        ok &= z < 3.0
        out.append({"t": t, "x": x, "value": v, "stderr": se, "reference": float(ref), "z": float(z)})
    return ok, {"queries": out, "quadrature_nodes": 64}


# ---------------------------------------------------------------- 3


def cross_method(seed):
    rs = np.random.default_rng(seed)
    grid = TimeGrid(0.0, 1.0, 20)
    out, ok = [], True
    for name in ("bm", "path_drift", "degenerate_integrator"):
        model = models.get_model(name)
        starts = [(0.0, Path.zeros(grid, model.d), np.zeros(model.n))]
        starts.append((0.5, _walk(rs, grid, model.d), rs.normal(0.0, 0.5, model.n)))
        for t, om, x in starts:
            q = ValueQuery(t, om, x)
            vl, sl = backward.value_estimate(model, q, "lsmc", SolverConfig(seed=seed, N=20_000))
            vn, sn = backward.value_estimate(model, q, "nested", SolverConfig(seed=seed + 1, N=20_000))
            ratio = abs(vl - vn) / (sl + sn)
            ok &= ratio < 3.0
            out.append({"model": name, "t": t, "lsmc": vl, "lsmc_se": sl, "nested": vn, "nested_se": sn,
                        "ratio": float(ratio)})
    return ok, {"starts": out}


# ---------------------------------------------------------------- 4


def degenerate_residual(seed, roots=100_000, m=40):
    rs = np.random.default_rng(seed)
    model = models.get_model("degenerate_integrator")
    grid = TimeGrid(0.0, 1.0, m)
    nodes = np.sort(rs.choice(np.arange(2, m - 2, 2), 5, replace=False))
    out, ok = [], True
    for i in nodes:
        t = grid.time(int(i))
        wd = _walk(rs, grid, 1).values
        x = rs.normal(0.0, 0.5, 2)
        wn = np.zeros((grid.m + 1, 2))
        wn[1:] = x  # only the node-t value of the state path is read
        om = Path(grid, np.concatenate([wd, wn], axis=1))
        r = calculus.residual_with_bound(
            lambda g: backward.LiftedField(model, g, roots=roots, seed=seed), model, t, om)
        ok &= r.within
        out.append({"t": t, "x": x.tolist(), "residual": r.residual, "stderr": r.stderr, "bound": r.bound,
                    "coarse": r.coarse, "doubled": r.doubled, "terms": r.terms})
    return ok, {"points": out, "roots": roots, "m": m}


# ---------------------------------------------------------------- 5


def dpp(seed):
    grid = TimeGrid(0.0, 1.0, 20)
    out, ok = [], True
    for name in ("bm", "degenerate_integrator"):
        model = models.get_model(name)
        for rule in (backward.StoppingRule("fixed", time=0.5), backward.StoppingRule("hitting", eps=0.5)):
            r = backward.dpp_residual(model, grid, rule, 10_000, seed)
            ok &= abs(r.mean) <= 3 * r.stderr
            out.append({"model": name, "tau": rule.kind, "mean": r.mean, "stderr": r.stderr, "v0": r.v0})
    return ok, {"runs": out, "N": 10_000}


# ---------------------------------------------------------------- 6


def regularity(seed, pairs=200, m=16, roots=2000):
    """Paired design: each random base query is perturbed along one random direction at all
    three distance decades, so envelopes are compared on the same queries."""
    grid = TimeGrid(0.0, 1.0, m)
    decades = (1e-1, 1e-2, 1e-3)
    bases = -(-pairs // len(decades))
    out, ok = [], True
    for mi, name in enumerate(models.CATALOG):
        rs = np.random.default_rng(seed + 7919 * mi)
        model = models.get_model(name)
        rows = []
        for _ in range(bases):
            i = int(rs.integers(0, m))
            t = grid.time(i)
            om = _walk(rs, grid, model.d)
            x = rs.normal(0.0, 1.0, model.n)
            dir_w = np.zeros((m + 1, model.d))
            if i > 0:
                dir_w[1:] = rs.normal(size=(m, model.d))
                dir_w /= np.max(np.linalg.norm(dir_w[: i + 1], axis=1))
            dir_x = rs.normal(size=model.n)
            dir_x /= np.linalg.norm(dir_x)
            xp = None
            pert = None
            if model.reads_x_path:
                base = np.zeros((m + 1, model.n))
                base[1:] = rs.normal(0.0, 0.3, (m, model.n))
                base[max(i, 1) :] = x  # node 0 stays at the origin; the node-t state is x regardless
                xp = Path(grid, base)
                pert = np.zeros_like(base)
                pert[1:] = rs.normal(size=(m, model.n))
                pert /= max(1.0, np.max(np.abs(pert[: i + 1])))
                pert[max(i, 1) :] = dir_x  # endpoint moves with x
            scale = rs.uniform(0.5, 1.0)
            for dec in decades:
                delta = dec * scale
                om2 = Path(grid, om.values + delta * dir_w)
                x2 = x + delta * dir_x
                xp2, d_xp = None, 0.0
                if xp is not None:
                    xp2 = Path(grid, xp.values + delta * pert)
                    d_xp = float(np.max(np.linalg.norm(xp2.values[:i] - xp.values[:i], axis=1))) if i > 0 else 0.0
                dist = lambda_distance(PathPoint(t, om), PathPoint(t, om2))
                rows.append((i, om, x, xp, om2, x2, xp2, dist, float(np.linalg.norm(x2 - x)), d_xp, dec))
        # batched CRN evaluation per start node
        vals = {}
        for i in sorted({r[0] for r in rows}):
            sel = [k for k, r in enumerate(rows) if r[0] == i]
            W, X = [], []
            for k in sel:
                _, om, x, xp, om2, x2, xp2, *_ = rows[k]
                for o, xx, pp in ((om, x, xp), (om2, x2, xp2)):
                    w0, xs0 = backward.conditioning_arrays(model, grid, i, o, xx, pp)
                    W.append(w0)
                    X.append(xs0)
            v, _, _ = backward.nested_values(model, grid, i, np.array(W), np.array(X), roots=roots, seed=seed, crn=True)
            for j, k in enumerate(sel):
                vals[k] = (float(v[2 * j]), float(v[2 * j + 1]))
        env = {}
        vmax = 0.0
        for k, r in enumerate(rows):
            v1, v2 = vals[k]
            vmax = max(vmax, abs(v1), abs(v2))
            den = float(model.modulus(r[7])) + r[8] + float(model.modulus(r[9]))
            env.setdefault(r[10], []).append(abs(v1 - v2) / den)
        e = [max(env[dc]) for dc in decades]
        bound = model.value_bound(grid.T)
        stable = all(np.isfinite(e)) and max(e[1], e[2]) <= 2.0 * e[0] + 1e-15
        bounded = vmax <= bound
        ok &= stable and bounded
        out.append({"model": name, "envelopes": e, "max_abs_value": vmax, "value_bound": bound,
                    "stable": bool(stable), "bounded": bool(bounded)})
    return ok, {"models": out, "pairs": bases * len(decades), "decades": list(decades)}


# ---------------------------------------------------------------- 7


def pathwise(seed):
    rs = np.random.default_rng(seed)
    worst, ok = {}, True
    for k in (1, 2):
        grid = TimeGrid(0.0, 1.0, 50)
        cat = calculus.smooth_catalog(k)
        for _ in range(10):
            om = _walk(rs, grid, k)
            t = grid.time(int(rs.integers(0, grid.m)))
            for name, u in cat.items():
                a = calculus.analytic_jet(u, t, om)
                f = calculus.pathwise_jet(u, t, om)
                err = max(
                    abs(f.dt - a.dt) / max(1.0, abs(a.dt)),
                    float(np.max(np.abs(f.dw - a.dw) / np.maximum(1.0, np.abs(a.dw)))),
                    float(np.max(np.abs(f.dww - a.dww) / np.maximum(1.0, np.abs(a.dww)))),
                )
                worst[f"{name}/k{k}"] = max(worst.get(f"{name}/k{k}", 0.0), err)
    fd_ok = max(worst.values()) < 1e-4
    ito = []
    ito_ok = True
    for k in (1, 2):
        for name, u in calculus.smooth_catalog(k).items():
            chk = calculus.functional_ito_check(u, 0.0, np.eye(k), TimeGrid(0.0, 1.0, 50), 10_000, seed)
            mean_ok = all(abs(lv.mean) <= 3 * lv.stderr + 1e-12 for lv in chk.levels)
            ito_ok &= mean_ok and chk.shrinking
            ito.append({"functional": f"{name}/k{k}", "levels": [lv.__dict__ for lv in chk.levels],
                        "mean_ok": bool(mean_ok), "shrinking": chk.shrinking})
    ok = fd_ok and ito_ok
    return ok, {"fd_max_relative_error": worst, "fd_ok": bool(fd_ok), "ito": ito}


# ---------------------------------------------------------------- 8


def enlarged_identity(seed):
    rs = np.random.default_rng(seed)
    grid = TimeGrid(0.0, 1.0, 10)
    names = [n for n in models.CATALOG if not models.get_model(n).reads_x_path]
    out, ok = [], True
    for inst in range(20):
        name = names[inst % len(names)]
        model = models.get_model(name)
        method = ("nested", "lsmc")[inst % 2]
        i = int(rs.integers(0, grid.m + 1))
        t = grid.time(i)
        base = _walk(rs, grid, model.d + model.n).values
        mod = base.copy()
        if i > 1:
            mod[1:i, model.d :] += rs.normal(0.0, 2.0, (i - 1, model.n))
        cfg = SolverConfig(seed=seed + inst, N=2000 if method == "lsmc" else 512)
        v1 = backward.value_enlarged(model, t, Path(grid, base), method, cfg)
        v2 = backward.value_enlarged(model, t, Path(grid, mod), method, cfg)
        # independent route: the original-space value at (t, omega^d, omega^n_t)
        v3 = backward.value(model, ValueQuery(t, Path(grid, base[:, : model.d]), base[i, model.d :]), method, cfg)
        ok &= v1 == v2 == v3
        out.append({"model": name, "method": method, "t": t, "v": v1, "identical": v1 == v2 == v3})
    return ok, {"instances": out}


# ---------------------------------------------------------------- 9


def _random_functional(rs):
    a, b, c, d, e, f = rs.normal(size=6)

    def xi(times, p):
        x = p[..., 0]
        return a * x[:, -1] + b * x[:, -1] ** 2 + c * np.max(x, axis=1) + d * np.sin(e * np.mean(x, axis=1)) + f * times[-1]

    return xi


def lattice(seed):
    rs = np.random.default_rng(seed)
    L = 1.0
    lat = nlexp.make_lattice(1, 8, L)
    sq = nlexp.lower_expectation(lambda t, p: p[:, -1, 0] ** 2, lat)
    lin = nlexp.lower_expectation(lambda t, p: p[:, -1, 0], lat)
    exact_ok = sq == 0.0
    lin_ok = abs(lin + L * lat.T) <= 1e-2
    viol = {"ordering": 0, "monotonicity": 0, "snell": 0, "constants": 0}
    slack = 1e-12
    for _ in range(100):
        xi = _random_functional(rs)
        eta = _random_functional(rs)

        def xi2(t, p, xi=xi, eta=eta):
            return xi(t, p) + np.abs(eta(t, p))

        lo, up = nlexp.lower_expectation(xi, lat), nlexp.upper_expectation(xi, lat)
        p0 = nlexp.fixed_control_expectation(xi, lat, [0.0], [1.0])
        tol = slack * (1 + abs(lo) + abs(up))
        if not (lo <= p0 + tol and p0 <= up + tol):
            viol["ordering"] += 1
        if not (nlexp.lower_expectation(xi2, lat) >= lo - tol and nlexp.upper_expectation(xi2, lat) >= up - tol):
            viol["monotonicity"] += 1
        ls, us = nlexp.lower_snell(xi, lat).value, nlexp.upper_snell(xi, lat).value
        y0 = float(xi(lat.times[:1], np.zeros((1, 1, 1)))[0])
        if not (us >= up - tol and us >= y0 - tol and ls <= lo + tol and ls <= y0 + tol):
            viol["snell"] += 1
        cst = float(rs.normal())
        const = lambda t, p, c=cst: np.full(p.shape[0], c)
        if not all(abs(v - cst) <= 1e-12 * (1 + abs(cst)) for v in (
                nlexp.lower_expectation(const, lat), nlexp.upper_expectation(const, lat),
                nlexp.lower_snell(const, lat).value, nlexp.upper_snell(const, lat).value)):
            viol["constants"] += 1
    ok = exact_ok and lin_ok and not any(viol.values())
    return ok, {"lower_square": sq, "lower_linear": lin, "target_linear": -L * lat.T, "violations": viol,
                "functionals": 100, "m": lat.m}


# ---------------------------------------------------------------- 10


def viscosity(seed, roots=100_000):
    model = models.get_model("bm")
    grid = TimeGrid(0.0, 1.0, 16)
    om = Path.zeros(grid, 2)
    phi = calculus.bm_lifted_candidate(grid.T)
    field_ = backward.LiftedField(model, grid, roots=roots, seed=seed)
    reps = {}
    ok = True
    for side in ("lower", "upper"):
        rep = nlexp.test_function_membership(phi, field_, grid, 0.0, om, L=2.0, eps=0.5, m=4, tol=1e-3,
                                             upper=side == "upper")
        ok &= rep.holds
        reps[side] = {"root_gap": rep.root_gap, "envelope": rep.envelope, "bound": rep.bound, "holds": rep.holds}
    lhs = nlexp.viscosity_inequality(phi, phi.at(0.0, om), model, 0.0, om)
    ok &= abs(lhs) < 1e-3
    return ok, {"membership": reps, "inequality": lhs}


CRITERIA = {
    1: ("identity model value is tanh(x) exactly", 1.0, identity_model),
    2: ("linear driver matches closed form", 60.0, linear_driver_closed_form),
    3: ("lsmc and nested agree", 300.0, cross_method),
    4: ("degenerate PPDE residual within bound", 600.0, degenerate_residual),
    5: ("dynamic programming residual", None, dpp),
    6: ("value regularity envelope and bound", None, regularity),
    7: ("pathwise calculus FD and functional Ito", None, pathwise),
    8: ("enlarged-space identity", None, enlarged_identity),
    9: ("nonlinear expectation lattice invariants", None, lattice),
    10: ("viscosity harness on bm", None, viscosity),
}


def run_criterion(n: int, seed: int = DEFAULT_SEED) -> CriterionResult:
    name, limit, fn = CRITERIA[n]
    return _timed(n, name, limit, fn, seed + n)


def reproducibility(first: dict, seed: int = DEFAULT_SEED) -> CriterionResult:
    """Re-run every criterion and compare report bodies byte for byte."""
    t0 = time.perf_counter()
    same = {}
    for n, res in sorted(first.items()):
        again = run_criterion(n, seed)
        same[str(n)] = again.body_json() == res.body_json()
    return CriterionResult(11, "byte-identical re-runs", all(same.values()), {"identical": same},
                           time.perf_counter() - t0, None)


def run_suite(seed: int = DEFAULT_SEED, only=None) -> list:
    nums = sorted(CRITERIA) if not only else sorted(int(n) for n in only if int(n) in CRITERIA)
    results = {n: run_criterion(n, seed) for n in nums}
    out = [results[n] for n in nums]
    if not only or 11 in [int(n) for n in only]:
        out.append(reproducibility(results, seed))
    return out
