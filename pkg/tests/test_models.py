import numpy as np
import pytest

from ppdelab import quadrature
from ppdelab.models import CATALOG, Modulus, check_assumptions, get_model
from ppdelab.paths import TimeGrid


@pytest.mark.parametrize("name", CATALOG)
def test_catalog_shapes(name):
    mdl = get_model(name)
    g = TimeGrid(0, 1, 4)
    N = 5
    w = np.zeros((N, 3, mdl.d))
    xs = np.ones((N, 3, mdl.n))
    assert mdl.drift(g.nodes[:3], w, xs).shape == (N, mdl.n)
    assert mdl.vol(g.nodes[:3], w, xs).shape == (N, mdl.n, mdl.d)
    assert mdl.driver(g.nodes[:3], w, xs, np.zeros(N), np.zeros((N, mdl.d))).shape == (N,)
    wT = np.zeros((N, 5, mdl.d))
    xT = np.ones((N, 5, mdl.n))
    assert mdl.terminal(g.nodes, wT, xT).shape == (N,)


@pytest.mark.parametrize("name", CATALOG)
def test_catalog_assumptions_hold(name):
    rep = check_assumptions(get_model(name), budget=2000)
    assert rep.ok, rep.violations


def test_unknown_model_and_parameter():
    with pytest.raises(ValueError, match="unknown model"):
        get_model("nope")
    with pytest.raises(ValueError, match="no parameter"):
        get_model("bm", {"c": 1.0})
    with pytest.raises(ValueError, match="outside"):
        get_model("linear_driver", {"c": 50.0})


def test_modulus_validation():
    with pytest.raises(ValueError):
        Modulus("cubic")
    with pytest.raises(ValueError):
        Modulus("sqrt", 0.0)
    assert Modulus("sqrt", 2.0)(4.0) == 4.0


def test_value_bound():
    assert get_model("bm").value_bound(1.0) == 1.0
    lin = get_model("linear_driver", {"c": 0.5, "offset": 1.0})
    assert lin.value_bound(2.0) == pytest.approx(np.e * 2.0)


def test_heat_tanh_derivatives_match_finite_differences():
    tau, x, h = 0.7, 0.3, 1e-4
    v, vx, vxx, vt = quadrature.heat_tanh(tau, x)
    assert vx == pytest.approx((quadrature.heat_tanh(tau, x + h)[0] - quadrature.heat_tanh(tau, x - h)[0]) / (2 * h), rel=1e-6)
    assert vt == pytest.approx((quadrature.heat_tanh(tau + h, x)[0] - quadrature.heat_tanh(tau - h, x)[0]) / (2 * h), rel=1e-6)
    # heat equation as an independent consistency check
    assert vt == pytest.approx(0.5 * vxx, rel=1e-8)


def test_gaussian_expectation_moments():
    assert quadrature.gaussian_expectation(lambda z: z**2, 1.0, 2.0) == pytest.approx(5.0)
    assert quadrature.gaussian_expectation(lambda z: z**4, 0.0, 1.0) == pytest.approx(3.0)


def test_references_at_horizon_are_terminal():
    assert get_model("bm").reference(1.0, 1.0, [0.4]) == pytest.approx(np.tanh(0.4))
    assert get_model("degenerate_integrator").reference(1.0, 1.0, [0.2, 0.4]) == pytest.approx(np.tanh(0.4))
    lin = get_model("linear_driver", {"c": 1.0, "offset": 0.5})
    assert lin.reference(0.0, 1.0, [0.0]) == pytest.approx(np.e * 0.5)
