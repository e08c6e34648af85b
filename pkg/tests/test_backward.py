import dataclasses
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppdelab import quadrature
from ppdelab.backward import (
    LiftedField, SolverConfig, StoppingRule, ValueField, ValueQuery, _Projector, dpp_residual, nested_cost,
    solve_backward_lsmc, solve_backward_nested, value, value_enlarged, value_estimate,
)
from ppdelab.errors import BudgetError, GridError, RegressionError, SolverError
from ppdelab.forward import simulate_forward
from ppdelab.models import get_model
from ppdelab.paths import Path, TimeGrid

G = TimeGrid(0.0, 1.0, 10)


def q(t, x, grid=G, d=1, omega=None):
    return ValueQuery(t, omega if omega is not None else Path.zeros(grid, d), x)


def test_zero_model_is_exact():
    mdl = get_model("zero")
    for x in (-1.0, 0.0, 0.4):
        v, se = value_estimate(mdl, q(0.0, [x]), "nested", SolverConfig(N=64))
        assert v == np.tanh(x) and se == 0.0
        assert value(mdl, q(0.3, [x]), "lsmc", SolverConfig(N=500)) == pytest.approx(np.tanh(x), abs=1e-14)


def test_terminal_query_returns_g():
    om = Path(G, np.linspace(0, 1, 11))
    assert value(get_model("bm"), ValueQuery(1.0, om, [0.3])) == np.tanh(0.3)
    assert value(get_model("lookback"), ValueQuery(1.0, om, [0.0])) == np.tanh(1.0)


@pytest.mark.parametrize("method", ["nested", "lsmc"])
@pytest.mark.parametrize("x", [-0.8, 0.5])
def test_bm_matches_heat_reference(method, x):
    mdl = get_model("bm")
    v, se = value_estimate(mdl, q(0.0, [x]), method, SolverConfig(N=20_000, seed=1))
    ref = mdl.reference(0.0, 1.0, [x])
    assert abs(v - ref) <= 4 * se + 1e-3


def test_linear_driver_lsmc_matches_closed_form():
    mdl = get_model("linear_driver", {"c": 0.5, "offset": 0.5})
    grid = TimeGrid(0, 1, 50)
    v, se = value_estimate(mdl, q(0.0, [0.2], grid), "lsmc", SolverConfig(N=50_000, seed=2))
    ref = mdl.reference(0.0, 1.0, [0.2])
    # time discretization of e^{cT} is O(dt)
    assert abs(v - ref) <= 4 * se + 0.5 * 0.25 * grid.dt * ref


def test_linear_driver_nested_matches_closed_form():
    mdl = get_model("linear_driver", {"c": 1.0, "offset": 1.0})
    v, se = value_estimate(mdl, q(0.0, [0.0]), "nested", SolverConfig(N=20_000, seed=3))
    ref = mdl.reference(0.0, 1.0, [0.0])
    disc = ref * (np.exp(1.0) / (1 + G.dt) ** G.m - 1)  # explicit step discount vs e^{cT}
    assert abs(v - ref) <= 4 * se + abs(disc) + 1e-3


def test_nested_is_linear_in_terminal_exactly():
    mdl = get_model("path_drift")
    g2 = dataclasses.replace(mdl, terminal=lambda t, w, x: 2.0 * mdl.terminal(t, w, x), sup_g=2.0)
    a = solve_backward_nested(mdl, 0.0, None, [0.1], grid=G, roots=256, seed=4)
    b = solve_backward_nested(g2, 0.0, None, [0.1], grid=G, roots=256, seed=4)
    assert b.value == 2.0 * a.value


def test_lookback_monotone_under_upward_bump():
    mdl = get_model("lookback")
    base = np.zeros(11)
    base[1:6] = [0.1, -0.2, 0.3, 0.0, 0.1]
    bumped = base.copy()
    bumped[3] += 0.5
    lo = solve_backward_nested(mdl, 0.5, Path(G, base), [0.0], roots=512, seed=5)
    hi = solve_backward_nested(mdl, 0.5, Path(G, bumped), [0.0], roots=512, seed=5)
    assert np.all(hi.samples >= lo.samples)
    assert hi.value > lo.value


def test_value_enlarged_matches_split_query():
    cfg = SolverConfig(N=256, seed=6)
    mdl = get_model("bm")
    H = Path(G, np.stack([np.linspace(0, 0.5, 11), np.linspace(0, -0.3, 11)], axis=1))
    t = 0.4
    wd, wn = H.split(1)
    assert value_enlarged(mdl, t, H, "nested", cfg) == value(mdl, ValueQuery(t, wd, wn.at(t)), "nested", cfg)
    with pytest.raises(GridError):
        value_enlarged(mdl, t, wd, "nested", cfg)


def test_value_enlarged_degenerate():
    cfg = SolverConfig(N=20_000, seed=7)
    mdl = get_model("degenerate_integrator")
    H = Path(G, np.zeros((11, 3)))
    v = value_enlarged(mdl, 0.0, H, "nested", cfg)
    assert abs(v - mdl.reference(0.0, 1.0, [0.0, 0.0])) < 0.02


def test_value_field_deduplicates_and_agrees_with_direct_solve():
    mdl = get_model("bm")
    fld = ValueField(mdl, G, roots=128, seed=8)
    W = np.zeros((3, 4, 1))
    X = np.zeros((3, 4, 1))
    X[:, -1, 0] = [0.2, 0.2, -0.1]
    v, se, c = fld.evaluate(3, W, X)
    assert v[0] == v[1] and v[2] != v[0]
    direct = solve_backward_nested(mdl, G.time(3), None, [0.2], grid=G, roots=128, seed=8)
    assert v[0] == direct.value


def test_lifted_field_estimate_matches_samples():
    lf = LiftedField(get_model("bm"), G, roots=64, seed=1)
    H = np.zeros((2, 3, 2))
    H[1, -1, 1] = 0.5
    v, se = lf.estimate(G.nodes[:3], H)
    c = lf.samples(G.nodes[:3], H)
    np.testing.assert_allclose(v, c.mean(axis=1), atol=1e-14)
    np.testing.assert_array_equal(lf(G.nodes[:3], H), v)


def test_dpp_zero_model_is_exactly_zero():
    res = dpp_residual(get_model("zero"), G, StoppingRule("fixed", time=0.5), 200, 0)
    assert res.mean == 0.0 and res.stderr == 0.0


@pytest.mark.parametrize("rule", [StoppingRule("fixed", time=0.5), StoppingRule("hitting", eps=0.3)])
def test_dpp_bm_unbiased(rule):
    res = dpp_residual(get_model("bm"), G, rule, 2000, 3)
    assert abs(res.mean) <= 4 * res.stderr
    assert np.all(res.tau_nodes >= 0) and np.all(res.tau_nodes <= G.m)


def test_dpp_linear_driver_unbiased():
    res = dpp_residual(get_model("linear_driver"), G, StoppingRule("fixed", time=0.5), 2000, 4)
    assert abs(res.mean) <= 4 * res.stderr + 5e-3


def test_stopping_rule_validation():
    B = np.zeros((2, 11, 1))
    with pytest.raises(ValueError):
        StoppingRule("hitting").nodes(G, 0, B)
    with pytest.raises(ValueError):
        StoppingRule("weird").nodes(G, 0, B)
    with pytest.raises(GridError):
        StoppingRule("fixed", time=0.1).nodes(G, 3, B)
    assert np.all(StoppingRule("hitting", eps=0.25).nodes(G, 0, B) == 2)


def test_budget_error_before_work():
    with pytest.raises(BudgetError):
        solve_backward_nested(get_model("bm"), 0.0, None, [0.0], grid=G, roots=1000, budget=5000)
    assert nested_cost((4, 2, 2)) == 4 + 8 + 16


def test_bad_branching():
    with pytest.raises(ValueError):
        solve_backward_nested(get_model("bm"), 0.0, None, [0.0], grid=G, branching=(4, 1))
    with pytest.raises(ValueError):
        solve_backward_nested(get_model("bm"), 0.0, None, [0.0], grid=G, branching=1)


def test_regression_error_names_node():
    rs = np.random.default_rng(0)
    x = rs.normal(size=2000)
    F = np.stack([x, x + 1e-9 * rs.normal(size=2000)], axis=1)
    with pytest.raises(RegressionError) as err:
        _Projector(F, node=7)
    assert err.value.node == 7


def test_projector_prunes_exact_collinearity():
    x = np.random.default_rng(1).normal(size=500)
    p = _Projector(np.stack([x, 2 * x, x**2], axis=1), node=0)
    assert p.size == 3
    target = 1 + 3 * x - x**2
    np.testing.assert_allclose(p(target), target, atol=1e-10)


def test_lsmc_rejects_aborted_samples():
    bm = get_model("bm")
    bad = dataclasses.replace(bm, drift=lambda t, w, x: np.where(x[:, -1] > 0, np.inf, 0.0))
    ens = simulate_forward(bad, 0.0, None, [0.0], 100, 0, grid=G)
    assert len(ens.aborted) > 0
    with pytest.raises(SolverError):
        solve_backward_lsmc(bad, ens)


def test_lsmc_unknown_features_and_csv():
    ens = simulate_forward(get_model("bm"), 0.0, None, [0.0], 50, 0, grid=TimeGrid(0, 1, 2))
    with pytest.raises(ValueError):
        solve_backward_lsmc(get_model("bm"), ens, features="nope")
    sol = solve_backward_lsmc(get_model("bm"), ens)
    buf = io.StringIO()
    sol.to_csv(buf)
    assert buf.getvalue().splitlines()[0] == "sample,node,Y,Z0"
    assert len(buf.getvalue().splitlines()) == 1 + 50 * 3


def test_unknown_method():
    with pytest.raises(ValueError):
        value(get_model("bm"), q(0.0, [0.0]), "magic")


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_bm_value_monotone_in_state(x1, x2):
    # common random numbers: the nested estimate is monotone in x because tanh is
    lo, hi = sorted((x1, x2))
    mdl = get_model("bm")
    cfg = SolverConfig(N=64, seed=9)
    assert value(mdl, q(0.5, [lo]), "nested", cfg) <= value(mdl, q(0.5, [hi]), "nested", cfg)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 9))
def test_values_respect_bound(x, i):
    mdl = get_model("path_drift")
    v = value(mdl, q(G.time(i), [x]), "nested", SolverConfig(N=64, seed=i))
    assert abs(v) <= mdl.value_bound(1.0)
