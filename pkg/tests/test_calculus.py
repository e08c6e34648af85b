import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppdelab.backward import LiftedField
from ppdelab.calculus import (
    analytic_jet, analytic_ppde_residual, bm_lifted_candidate, functional_ito_check, mppde_residual, pathwise_jet,
    ppde_residual, residual_with_bound, residuals_to_csv, restrict, second_vertical_derivative_fd, smooth_catalog,
    time_derivative_fd, vertical_derivative_fd,
)
from ppdelab.errors import GridError
from ppdelab.models import get_model
from ppdelab.paths import Path, TimeGrid

G = TimeGrid(0.0, 1.0, 20)


def rand_path(seed, k, grid=G):
    rs = np.random.default_rng(seed)
    v = np.zeros((grid.m + 1, k))
    v[1:] = np.cumsum(rs.normal(0, np.sqrt(grid.dt), (grid.m, k)), axis=0)
    return Path(grid, v)


def test_coordinate_examples():
    u = smooth_catalog(1)["coordinate"]
    om = rand_path(0, 1)
    assert vertical_derivative_fd(u, 0.5, om)[0] == pytest.approx(1.0, abs=1e-9)
    assert time_derivative_fd(u, 0.5, om) == 0.0
    assert second_vertical_derivative_fd(u, 0.5, om)[0, 0] == pytest.approx(0.0, abs=1e-6)


def test_running_integral_examples():
    u = smooth_catalog(1)["running_integral"]
    om = rand_path(1, 1)
    # horizontal extension adds omega_t * h exactly
    assert time_derivative_fd(u, 0.5, om) == pytest.approx(om.at(0.5)[0], rel=1e-10)
    # the left rule never sees the current node, so a vertical bump changes nothing
    assert vertical_derivative_fd(u, 0.5, om)[0] == 0.0


def test_trapezoid_vertical_derivative_is_half_step():
    u = smooth_catalog(1, rule="trapezoid")["running_integral"]
    assert vertical_derivative_fd(u, 0.5, rand_path(2, 1))[0] == pytest.approx(G.dt / 2, rel=1e-6)


def test_square_minus_t_examples():
    u = smooth_catalog(2)["square_minus_t"]
    om = rand_path(3, 2)
    jet = pathwise_jet(u, 0.5, om)
    assert jet.dt == pytest.approx(-2.0, rel=1e-9)
    np.testing.assert_allclose(jet.dw, 2 * om.at(0.5), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(jet.dww, 2 * np.eye(2), atol=1e-5)


@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("name", ["coordinate", "square_minus_t", "running_integral", "product", "sine"])
def test_fd_matches_analytic_at_interior_nodes(k, name):
    u = smooth_catalog(k)[name]
    om = rand_path(10 + k, k)
    for t in (0.25, 0.5, 0.75):
        fd, an = pathwise_jet(u, t, om), analytic_jet(u, t, om)
        scale = 1.0 + abs(an.value)
        assert abs(fd.dt - an.dt) <= 1e-4 * scale
        assert np.max(np.abs(fd.dw - an.dw)) <= 1e-4 * scale
        assert np.max(np.abs(fd.dww - an.dww)) <= 1e-4 * scale


def test_sine_time_derivative_is_exact_for_affine_time_dependence():
    u = smooth_catalog(1)["sine"]
    om = rand_path(4, 1)
    assert time_derivative_fd(u, 0.5, om) == pytest.approx(np.sin(om.at(0.5)[0]), rel=1e-9)


def test_time_derivative_at_horizon_uses_left_limit():
    u = smooth_catalog(1)["square_minus_t"]
    assert time_derivative_fd(u, 1.0, rand_path(5, 1)) == pytest.approx(-1.0, rel=1e-9)


def test_time_bump_must_be_step_multiple():
    with pytest.raises(GridError):
        time_derivative_fd(smooth_catalog(1)["coordinate"], 0.5, rand_path(0, 1), h=0.013)


def test_nonpositive_bumps_rejected():
    with pytest.raises(ValueError):
        pathwise_jet(smooth_catalog(1)["coordinate"], 0.5, rand_path(0, 1), eps1=0.0)


def test_analytic_jet_needs_derivatives():
    from ppdelab.calculus import SmoothFunctional

    with pytest.raises(ValueError):
        analytic_jet(SmoothFunctional("bare", 1, lambda t, w: w[:, -1, 0]), 0.5, rand_path(0, 1))


def test_heat_cancellation_analytic_and_fd():
    mdl = get_model("bm")
    cand = bm_lifted_candidate(1.0)
    om = Path(G, np.stack([np.zeros(21), np.r_[0.0, np.full(20, 0.3)]], axis=1))
    for t in (0.25, 0.5, 0.75):
        assert abs(analytic_ppde_residual(cand, mdl, t, om).value) < 1e-10
        r = ppde_residual(cand, mdl, t, om)
        # forward time difference has O(dt) error times u_tt
        assert abs(r.value) < 0.05 * G.dt * 10


def test_residual_rejects_wrong_dimension():
    with pytest.raises(GridError):
        ppde_residual(bm_lifted_candidate(1.0), get_model("bm"), 0.5, rand_path(0, 1))


def test_nested_candidate_residual_within_bound():
    mdl = get_model("bm")
    grid = TimeGrid(0.0, 1.0, 20)
    om = Path(grid, np.stack([np.zeros(21), np.r_[0.0, np.full(20, 0.2)]], axis=1))
    br = residual_with_bound(lambda g: LiftedField(mdl, g, roots=20_000, seed=1), mdl, 0.5, om)
    assert br.within
    assert br.stderr > 0
    buf = io.StringIO()
    residuals_to_csv([(0, 0.5, br)], buf)
    assert buf.getvalue().splitlines()[0].startswith("point,t,residual")


def test_mixed_residual_matches_enlarged():
    mdl = get_model("bm")
    cand = bm_lifted_candidate(1.0)

    def mixed(times, w, x):
        return cand(times, np.concatenate([w, np.repeat(x[:, None, :], w.shape[1], axis=1)], axis=2))

    om = Path(G, np.zeros((21, 1)))
    r = mppde_residual(mixed, mdl, 0.5, om, [0.3])
    full = ppde_residual(cand, mdl, 0.5, Path(G, np.stack([np.zeros(21), np.r_[0.0, np.full(20, 0.3)]], axis=1)))
    assert r.value == pytest.approx(full.value, abs=1e-12)
    with pytest.raises(GridError):
        mppde_residual(mixed, mdl, 0.0, om, [0.3])


def test_restrict():
    p = rand_path(0, 1)
    c = restrict(p, TimeGrid(0, 1, 10))
    np.testing.assert_array_equal(c.values, p.values[::2])
    with pytest.raises(GridError):
        restrict(p, TimeGrid(0, 1, 7))


def test_ito_exact_for_coordinate():
    chk = functional_ito_check(smooth_catalog(1)["coordinate"], 0.0, 1.0, TimeGrid(0, 1, 20), 500, 0)
    assert all(lv.max_abs < 1e-12 for lv in chk.levels)


@pytest.mark.parametrize("name", ["square_minus_t", "product", "sine"])
def test_ito_residual_centered_and_shrinking(name):
    u = smooth_catalog(2)[name]
    chk = functional_ito_check(u, 0.0, np.eye(2), TimeGrid(0, 1, 50), 10_000, 1)
    assert chk.shrinking
    for lv in chk.levels:
        assert abs(lv.mean) <= 3 * lv.stderr + 1e-12


def test_ito_with_drift():
    # with drift the dt-term picks up u_w . alpha; the residual still vanishes in the limit
    u = smooth_catalog(1)["square_minus_t"]
    chk = functional_ito_check(u, 0.5, 0.7, TimeGrid(0, 1, 40), 4000, 2)
    assert chk.shrinking


def test_ito_fd_agrees_with_analytic():
    u = smooth_catalog(1)["product"]
    a = functional_ito_check(u, 0.0, 1.0, TimeGrid(0, 1, 10), 50, 3)
    b = functional_ito_check(u, 0.0, 1.0, TimeGrid(0, 1, 10), 50, 3, use_fd=True)
    for la, lb in zip(a.levels, b.levels):
        assert la.rms == pytest.approx(lb.rms, rel=1e-3, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 1), elements=st.floats(-2, 2, allow_nan=False)), st.integers(2, 18))
def test_sine_fd_property(v, i):
    u = smooth_catalog(1)["sine"]
    om = Path(G, np.vstack([[[0.0]], v]))
    t = G.time(i)
    fd, an = pathwise_jet(u, t, om), analytic_jet(u, t, om)
    assert abs(fd.dw[0] - an.dw[0]) <= 1e-7
    assert abs(fd.dww[0, 0] - an.dww[0, 0]) <= 1e-4
    assert fd.dt == pytest.approx(an.dt, abs=1e-9)
