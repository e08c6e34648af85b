"""Configuration-driven experiments and their JSON reports.

A config is one JSON document. Paths are given as node-value arrays on the configured grid.
Report bodies are deterministic given config and seed; wall-clock time is kept outside the body.
"""

from __future__ import annotations

import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ppdelab import __version__, backward, calculus, forward, models, nlexp
from ppdelab.errors import ConfigError
from ppdelab.paths import Path, TimeGrid

KINDS = (
    "simulate-forward", "solve", "value", "dpp", "residual", "nlexp", "snell", "viscosity", "assumptions", "bench",
)

FUNCTIONALS = {
    "terminal": lambda t, p: p[:, -1, 0],
    "terminal_square": lambda t, p: np.sum(p[:, -1] ** 2, axis=1),
    "abs_terminal": lambda t, p: np.linalg.norm(p[:, -1], axis=1),
    "neg_abs": lambda t, p: -np.linalg.norm(p[:, -1], axis=1),
    "running_max": lambda t, p: np.max(p[..., 0], axis=1),
    "time": lambda t, p: np.full(p.shape[0], float(t[-1])),
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int | None = None
    model: dict = field(default_factory=lambda: {"name": "bm", "params": {}})
    grid: dict = field(default_factory=lambda: {"t0": 0.0, "T": 1.0, "m": 20})
    N: int = 10_000
    method: str = "lsmc"
    features: str | None = None
    picard: int | None = None
    roots: int = 4096
    budget: int = backward.DEFAULT_BUDGET
    query: dict | None = None
    tau: dict | None = None
    points: list | None = None
    lattice: dict | None = None
    functional: str = "terminal"
    sense: str = "lower"
    tolerances: dict = field(default_factory=dict)
    threads: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object", ["<root>: not an object"])
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError("unknown config fields", [f"{k}: unknown field" for k in unknown])
        if "kind" not in doc:
            raise ConfigError("missing kind", ["kind: required"])
        return cls(**doc)

    def echo(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _grid(cfg) -> TimeGrid:
    g = cfg.grid
    return TimeGrid(float(g.get("t0", 0.0)), float(g.get("T", 1.0)), int(g["m"]))


def _model(cfg) -> models.Model:
    return models.get_model(cfg.model.get("name", ""), cfg.model.get("params") or {})


def _path(grid: TimeGrid, values, dim: int) -> Path:
    if values is None:
        return Path.zeros(grid, dim)
    v = np.asarray(values, dtype=float).reshape(grid.m + 1, dim)
    return Path(grid, v)


def validate(cfg: ExperimentConfig) -> list:
    """Every problem found, one ``field: message`` string each; empty iff runnable."""
    diags = []
    if cfg.kind not in KINDS:
        diags.append(f"kind: unknown experiment {cfg.kind!r} (choose from {', '.join(KINDS)})")
    if cfg.seed is None:
        diags.append("seed: required (no ambient randomness)")
    elif not isinstance(cfg.seed, int) or cfg.seed < 0:
        diags.append("seed: must be a non-negative integer")
    model = None
    name = (cfg.model or {}).get("name")
    if name not in models.CATALOG:
        diags.append(f"model.name: unknown model {name!r} (catalog: {', '.join(models.CATALOG)})")
    else:
        try:
            model = _model(cfg)
        except ValueError as exc:
            diags.append(f"model.params: {exc}")
    grid = None
    try:
        m = cfg.grid.get("m")
        if not isinstance(m, int) or m < 1:
            diags.append(f"grid.m: must be a positive integer, got {m!r}")
        else:
            grid = _grid(cfg)
    except (ValueError, TypeError, KeyError) as exc:
        diags.append(f"grid: {exc}")
    if not isinstance(cfg.N, int) or cfg.N < 1:
        diags.append("N: must be a positive integer")
    if cfg.method not in ("lsmc", "nested"):
        diags.append(f"method: unknown method {cfg.method!r}")
    if cfg.features is not None and cfg.features not in backward.FEATURES:
        diags.append(f"features: unknown feature map {cfg.features!r}")
    if cfg.picard is not None and (not isinstance(cfg.picard, int) or cfg.picard < 1):
        diags.append("picard: must be an integer >= 1")
    if not isinstance(cfg.roots, int) or cfg.roots < 2:
        diags.append("roots: must be an integer >= 2")
    if cfg.kind in ("nlexp", "snell"):
        lat = cfg.lattice or {}
        try:
            L = nlexp.ControlLattice(int(lat.get("k", 1)), int(lat.get("m", 4)), float(lat.get("L", 1.0)), float(lat.get("T", 1.0)))
            cost = L.cost()
            budget = int(lat.get("budget", nlexp.DEFAULT_BUDGET))
            if cost > budget:
                diags.append(f"lattice: needs {cost} weighted child evaluations, budget is {budget}")
        except (ValueError, TypeError) as exc:
            diags.append(f"lattice: {exc}")
        if cfg.functional not in FUNCTIONALS:
            diags.append(f"functional: unknown functional {cfg.functional!r} (choose from {', '.join(FUNCTIONALS)})")
        if cfg.sense not in ("lower", "upper"):
            diags.append("sense: must be 'lower' or 'upper'")
    if cfg.kind in ("value", "solve", "simulate-forward") and cfg.query is not None and grid is not None and model is not None:
        q = cfg.query
        try:
            grid.index(float(q.get("t", grid.t0)))
        except ValueError as exc:
            diags.append(f"query.t: {exc}")
        try:
            _path(grid, q.get("omega"), model.d)
        except (ValueError, TypeError) as exc:
            diags.append(f"query.omega: {exc}")
        x = np.atleast_1d(np.asarray(q.get("x", np.zeros(model.n)), dtype=float))
        if x.shape != (model.n,):
            diags.append(f"query.x: expected {model.n} components, got {x.size}")
    if cfg.kind == "dpp":
        tau = cfg.tau or {}
        if tau.get("kind", "fixed") not in ("fixed", "hitting"):
            diags.append(f"tau.kind: unknown stopping rule {tau.get('kind')!r}")
        elif tau.get("kind", "fixed") == "fixed" and grid is not None:
            try:
                grid.index(float(tau.get("time", 0.5 * (grid.t0 + grid.T))))
            except ValueError as exc:
                diags.append(f"tau.time: {exc}")
        elif tau.get("kind") == "hitting" and not float(tau.get("eps", 0)) > 0:
            diags.append("tau.eps: must be positive")
    if cfg.kind == "residual" and model is not None:
        cand = cfg.extra.get("candidate", "nested")
        if cand not in ("nested", "bm_quadrature"):
            diags.append(f"extra.candidate: unknown candidate {cand!r}")
        if grid is not None and grid.m % 2:
            diags.append("grid.m: residual bounds need an even number of steps")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        diags.append("threads: must be a positive integer")
    return diags


def _mc(value, stderr):
    return {"value": float(value), "stderr": float(stderr), "estimator": "mc"}


def _exact(value):
    return {"value": float(value), "estimator": "exact"}


def _empirical(value):
    """A largest observed ratio over sampled pairs (a lower bound on the true constant)."""
    return {"value": float(value), "estimator": "empirical_max"}


def _query(cfg, grid, model):
    q = cfg.query or {}
    t = float(q.get("t", grid.t0))
    omega = _path(grid, q.get("omega"), model.d)
    x = np.atleast_1d(np.asarray(q.get("x", np.zeros(model.n)), dtype=float))
    xp = _path(grid, q["x_path"], model.n) if q.get("x_path") is not None else None
    return t, omega, x, xp


def _solver_config(cfg):
    return backward.SolverConfig(
        seed=cfg.seed, N=cfg.N if cfg.method == "lsmc" else cfg.roots, branching=None, picard=cfg.picard,
        features=cfg.features, budget=cfg.budget, threads=cfg.threads,
    )


def _write(out_dir, name, writer):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        writer(fh)
    return name


def run(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Execute one experiment; returns the report (``wall_clock_s`` is outside ``body``)."""
    diags = validate(cfg)
    if diags:
        raise ConfigError("invalid configuration", diags)
    t0 = time.perf_counter()
    tol = cfg.tolerances or {}
    z = float(tol.get("z", 3.0))
    results: dict[str, Any] = {}
    artifacts = []
    passed = None
    kind = cfg.kind
    if kind == "bench":
        from ppdelab import bench

        suite = bench.run_suite(seed=cfg.seed, only=cfg.extra.get("only"))
        results = {"criteria": [r.body() for r in suite]}
        passed = all(r.passed for r in suite)
    elif kind == "assumptions":
        model = _model(cfg)
        rep = models.check_assumptions(model, budget=cfg.N, seed=cfg.seed, T=_grid(cfg).T, m=_grid(cfg).m)
        results = {
            "lipschitz_x": _empirical(rep.lipschitz_x), "lipschitz_yz": _empirical(max(rep.lipschitz_y, rep.lipschitz_z)),
            "modulus_ratio": {k: _empirical(v) for k, v in rep.modulus_ratio.items()},
            "combined_ratio": {k: _empirical(v) for k, v in rep.combined_ratio.items()},
            "declared_constant": _exact(rep.declared_c),
            "violations": list(rep.violations),
        }
        passed = rep.ok
    else:
        model = _model(cfg)
        grid = _grid(cfg)
        if kind == "simulate-forward":
            t, omega, x, xp = _query(cfg, grid, model)
            ens = forward.simulate_forward(model, t, omega, x, cfg.N, cfg.seed, x_path=xp)
            p = float(cfg.extra.get("p", 2.0))
            results = {"moment": _mc(forward.moment_estimate(ens, p), float("nan")), "p": p, "aborted": int(len(ens.aborted))}
            results["moment"]["stderr"] = None
            name = _write(out_dir, "forward.csv", lambda fh: forward.ensemble_to_csv(ens, fh))
            if name:
                artifacts.append(name)
        elif kind in ("solve", "value"):
            t, omega, x, xp = _query(cfg, grid, model)
            q = backward.ValueQuery(t, omega, x, xp)
            if kind == "solve" and cfg.method == "lsmc" and grid.index(t) < grid.m:
                ens = forward.simulate_forward(model, t, omega, x, cfg.N, cfg.seed, x_path=xp)
                sol = backward.solve_backward_lsmc(model, ens, cfg.features, cfg.picard or 3)
                v, se = sol.v0, sol.stderr
                results["max_condition"] = max(dg["cond"] for dg in sol.diagnostics)
                name = _write(out_dir, "backward.csv", sol.to_csv)
                if name:
                    artifacts.append(name)
            else:
                v, se = backward.value_estimate(model, q, cfg.method, _solver_config(cfg))
            results["value"] = _exact(v) if se == 0.0 else _mc(v, se)
            if model.reference is not None and model.markov and xp is None:
                ref = model.reference(t, grid.T, x)
                results["reference"] = {"value": float(ref), "estimator": "quadrature"}
                if "z" in tol:
                    passed = abs(v - ref) <= z * se + float(tol.get("abs", 0.0))
            if "expected" in tol:
                ok = abs(v - float(tol["expected"])) <= float(tol.get("abs", 0.0)) + z * se
                passed = ok if passed is None else passed and ok
        elif kind == "dpp":
            tau = cfg.tau or {"kind": "fixed", "time": 0.5 * (grid.t0 + grid.T)}
            rule = backward.StoppingRule(tau.get("kind", "fixed"), tau.get("time"), tau.get("eps"), tau.get("capped", True))
            t, omega, x, _ = _query(cfg, grid, model)
            r = backward.dpp_residual(model, grid, rule, cfg.N, cfg.seed, t=t, omega=omega, x=x, threads=cfg.threads,
                                      inner_roots=int(cfg.extra.get("inner_roots", 8)))
            results = {"residual": _mc(r.mean, r.stderr), "v0": _mc(r.v0, r.v0_stderr), "z": z}
            passed = abs(r.mean) <= z * r.stderr
        elif kind == "residual":
            rows = []
            cand = cfg.extra.get("candidate", "nested")
            pts = cfg.points or [{"t": grid.time(grid.m // 2)}]
            out = []
            for pid, pt in enumerate(pts):
                t = float(pt["t"])
                om = _path(grid, pt.get("omega"), model.d + model.n)
                if cand == "bm_quadrature":
                    make = lambda g: calculus.bm_lifted_candidate(grid.T)  # noqa: E731
                else:
                    make = lambda g: backward.LiftedField(model, g, roots=cfg.roots, seed=cfg.seed, threads=cfg.threads)  # noqa: E731
                br = calculus.residual_with_bound(make, model, t, om)
                rows.append((pid, t, br))
                res = _exact(br.residual) if br.stderr == 0.0 else _mc(br.residual, br.stderr)
                out.append({"point": pid, "t": t, "residual": res, "bound": br.bound,
                            "terms": br.terms, "within": br.within})
            results = {"points": out}
            passed = all(o["within"] for o in out)
            name = _write(out_dir, "residuals.csv", lambda fh: calculus.residuals_to_csv(rows, fh))
            if name:
                artifacts.append(name)
        elif kind in ("nlexp", "snell"):
            lat_cfg = cfg.lattice or {}
            lat = nlexp.ControlLattice(int(lat_cfg.get("k", 1)), int(lat_cfg.get("m", 4)), float(lat_cfg.get("L", 1.0)),
                                       float(lat_cfg.get("T", 1.0)))
            xi = FUNCTIONALS[cfg.functional]
            if kind == "nlexp":
                fn = nlexp.lower_expectation if cfg.sense == "lower" else nlexp.upper_expectation
                v = fn(xi, lat)
                results = {"value": {"value": v, "estimator": "lattice", "steps": lat.m}}
            else:
                fn = nlexp.lower_snell if cfg.sense == "lower" else nlexp.upper_snell
                r = fn(xi, lat)
                results = {"value": {"value": r.value, "estimator": "lattice", "steps": lat.m},
                           "stop_at_root": r.stop_at_root, "control": r.control}
                v = r.value
            if "expected" in tol:
                passed = abs(v - float(tol["expected"])) <= float(tol.get("abs", 1e-2))
        elif kind == "viscosity":
            if model.name != "bm":
                raise ConfigError("invalid configuration", ["model.name: the viscosity harness ships a candidate for 'bm' only"])
            pt = (cfg.points or [{"t": grid.t0}])[0]
            t = float(pt["t"])
            om = _path(grid, pt.get("omega"), 2)
            phi = calculus.bm_lifted_candidate(grid.T)
            field_ = backward.LiftedField(model, grid, roots=cfg.roots, seed=cfg.seed, threads=cfg.threads)
            lat_cfg = cfg.lattice or {}
            tol_m = float(tol.get("membership", 1e-3))
            reps = {}
            for side in ("lower", "upper"):
                rep = nlexp.test_function_membership(
                    phi, field_, grid, t, om, float(lat_cfg.get("L", 2.0)), float(lat_cfg.get("eps", 0.5)),
                    int(lat_cfg.get("m", 4)), tol_m, upper=side == "upper",
                )
                reps[side] = {"root_gap": {"value": rep.root_gap, "estimator": "mc", "mc_bound": rep.mc_bound}, "envelope": rep.envelope, "bound": rep.bound,
                              "holds": rep.holds}
            lhs = nlexp.viscosity_inequality(phi, phi.at(t, om), model, t, om)
            tol_v = float(tol.get("inequality", 1e-3))
            results = {"membership": reps, "inequality": _exact(lhs)}
            passed = all(r["holds"] for r in reps.values()) and abs(lhs) < tol_v
    report = {
        "body": {"kind": kind, "config": cfg.echo(), "results": results, "passed": passed, "version": __version__,
                 "artifacts": artifacts},
        "wall_clock_s": time.perf_counter() - t0,
    }
    return report


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def body_json(report: dict) -> str:
    """Canonical serialization of the report body (the reproducible part)."""
    return json.dumps(_clean(report["body"]), sort_keys=True, indent=2)


def report_json(report: dict) -> str:
    doc = {"body": _clean(report["body"]), "wall_clock_s": report["wall_clock_s"]}
    return json.dumps(doc, sort_keys=True, indent=2)


def load_config(fh: io.TextIOBase) -> ExperimentConfig:
    try:
        doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("config is not valid JSON", [f"<root>: {exc}"]) from None
    return ExperimentConfig.from_dict(doc)
