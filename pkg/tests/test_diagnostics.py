import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shrinkerlab.diagnostics import (
    IDENTITIES,
    avoidance_check,
    decay_fit,
    delta_series,
    detect_and_classify,
    fit_circle,
    identity_errors,
    nestedness_check,
    noncollapse_delta,
    pinching_check,
    polyline_distance,
    sign_preservation,
    verify_evolution_identities,
    window_rates,
    ztilde,
)
from shrinkerlab.errors import InsufficientHistory, MixedSign, NotDisjoint, ProbeContaminated
from shrinkerlab.flow import FlowConfig, FlowTrajectory, run
from shrinkerlab.geometry import GeometrySnapshot, circle, sphere_profile


def ellipse(a, b, n):
    t = 2 * np.pi * np.arange(n) / n
    return GeometrySnapshot(np.column_stack([a * np.cos(t), b * np.sin(t)]))


@pytest.fixture(scope="module")
def collapse():
    return run(FlowConfig("RMCF", circle(1.0, 128), t_max=2.0, output_dt=0.02))


@pytest.fixture(scope="module")
def mcf_collapse():
    return run(FlowConfig("MCF", circle(1.0, 128), t_max=1.0, output_dt=0.01))


@pytest.fixture(scope="module")
def ellipse_run():
    return run(FlowConfig("RMCF", ellipse(1.3, 1.0, 256), t_max=0.2, output_dt=0.01, remesh_every=10_000))


# ----------------------------------------------------------------------
# two-point function and non-collapsing


def test_ztilde_diagonal():
    g = ellipse(1.3, 1.0, 64)
    assert ztilde(g, 0.3, 5, 5) == 0.0


@pytest.mark.parametrize("delta, expected", [(0.25, 0.5), (0.5, 0.0)])
def test_ztilde_antipodal_unit_circle(delta, expected):
    g = circle(1.0, 64)
    assert ztilde(g, delta, 0, 32) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(j=st.integers(0, 63), i=st.integers(0, 63))
def test_ztilde_vanishes_at_critical_delta(i, j):
    assert ztilde(circle(1.0, 64), 0.5, i, j) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("r, delta", [(1.0, 0.5), (1.2, 0.28), (0.7, 1 - 0.49 / 2)])
def test_noncollapse_circles(r, delta):
    rep = noncollapse_delta(circle(r, 128))
    assert rep.sign == 1
    assert rep.delta_in == pytest.approx(delta, rel=1e-9)
    assert math.isinf(rep.delta_out)
    assert rep.min_Ztilde >= -1e-12


def test_noncollapse_concave_circle():
    # signed constant matches (2 - r^2)/2 on the concave side too
    rep = noncollapse_delta(circle(1.6, 128))
    assert rep.sign == -1
    assert rep.sign * rep.delta_in == pytest.approx((2 - 1.6**2) / 2, rel=1e-9)


def test_noncollapse_sphere_profile():
    rep = noncollapse_delta(sphere_profile(1.0, 129))
    # sphere of radius R: Htilde = 2/R - R/2, and the ball of radius delta/Htilde fits when delta <= R Htilde
    assert rep.delta_in == pytest.approx(1.5, rel=1e-6)


def test_noncollapse_mixed_sign():
    with pytest.raises(MixedSign):
        noncollapse_delta(ellipse(2.0, 1.0, 128))


def test_noncollapse_ellipse_below_circle_bound():
    g = ellipse(1.1, 1.0, 256)
    rep = noncollapse_delta(g)
    assert 0.0 < rep.delta_in < float(np.min(1.0 / (g.kappa / g.Htilde)))


@pytest.mark.parametrize("geom", [ellipse(1.1, 1.0, 256), ellipse(1.0, 1.2, 200), circle(1.6, 128)], ids=["ellipse-x", "ellipse-y", "concave-circle"])
def test_ztilde_consistent_with_delta(geom):
    rep = noncollapse_delta(geom)
    scale = float(np.max(np.abs(geom.vertices))) ** 2
    d = rep.sign * rep.delta_in
    assert rep.min_Ztilde >= -1e-9 * scale
    assert rep.sign * ztilde(geom, d, *rep.argmin) == pytest.approx(0.0, abs=1e-9 * scale)
    # a slightly larger constant is violated somewhere
    n = len(geom.vertices)
    z = [rep.sign * ztilde(geom, 1.01 * d, i, j) for i in range(0, n, 4) for j in range(n)]
    assert min(z) < 0.0


def test_delta_along_circle_run(collapse):
    times, reps = delta_series(collapse, every=5)
    d = np.array([r.delta_in for r in reps])
    assert np.all(np.diff(d) >= -1e-12)
    assert np.allclose(d, np.exp(times) / 2, rtol=1e-2)


@pytest.mark.parametrize("r", [1.0, 1.2])
def test_pinching_saturated_on_circles(r):
    res = pinching_check(circle(r, 128))
    assert res.ratio == pytest.approx(1.0, abs=1e-9)
    assert res.passed


def test_pinching_ellipse():
    assert pinching_check(ellipse(1.1, 1.0, 256)).ratio <= 1.0 + 1e-6


# ----------------------------------------------------------------------
# sign preservation and nestedness


def test_sign_preserved_on_collapse(collapse):
    rep = sign_preservation(collapse)
    assert rep.initial_label == "rescaled_mean_convex"
    assert rep.violations == 0 and rep.passed


def test_sign_stationary_is_skipped():
    tr = run(FlowConfig("RMCF", circle(math.sqrt(2.0), 64), t_max=0.1))
    rep = sign_preservation(tr)
    assert rep.skipped and rep.initial_label == "neither"


def test_sign_violation_detected():
    tr = FlowTrajectory("RMCF", snapshots=[circle(1.0, 64), circle(1.6, 64, time=0.1)])
    rep = sign_preservation(tr)
    assert rep.violations == 1 and rep.passed is False


def test_nestedness_on_collapse(collapse):
    assert nestedness_check(collapse, "inward").passed
    out = nestedness_check(collapse, "outward")
    assert not out.passed and out.violations > 0


def test_nestedness_expanding():
    tr = run(FlowConfig("RMCF", circle(1.6, 64), t_max=0.5, output_dt=0.05))
    assert nestedness_check(tr, "outward", all_pairs=True).passed


# ----------------------------------------------------------------------
# avoidance


def mcf_pair(ga, gb, t_max, output_dt=0.01):
    cfg = dict(t_max=t_max, output_dt=output_dt, cfl=0.2)
    return run(FlowConfig("MCF", ga, **cfg)), run(FlowConfig("MCF", gb, **cfg))


def test_polyline_distance_concentric():
    # the refined outer polygon still sags inward by 2 (1 - cos(pi/384))
    assert polyline_distance(circle(1.0, 64), circle(2.0, 96)) == pytest.approx(1.0, abs=1e-4)


def test_avoidance_concentric_one_three():
    a, b = mcf_pair(circle(1.0, 128), circle(3.0, 128), t_max=0.45)
    rep = avoidance_check(a, b)
    assert rep.passed
    assert np.all(rep.distances >= 2.0 - 1e-3)
    # d = sqrt(9 - 2 s) - sqrt(1 - 2 s) grows until the inner circle vanishes
    s = rep.times + 1.0
    assert np.allclose(rep.distances, np.sqrt(9 - 2 * s) - np.sqrt(1 - 2 * s), atol=2e-3)


def test_avoidance_translates():
    a, b = mcf_pair(circle(1.0, 128), circle(1.0, 128, center=(2.5, 0.0)), t_max=0.05, output_dt=0.005)
    rep = avoidance_check(a, b)
    assert rep.d0 == pytest.approx(0.5, abs=1e-5)
    assert rep.passed and rep.min_margin >= -1e-3


def test_avoidance_overlap():
    a, b = mcf_pair(circle(1.0, 64), circle(1.0, 64, center=(1.0, 0.0)), t_max=0.01)
    with pytest.raises(NotDisjoint):
        avoidance_check(a, b)


def test_avoidance_needs_mcf(collapse):
    with pytest.raises(ValueError):
        avoidance_check(collapse, collapse)


# ----------------------------------------------------------------------
# evolution identities


@pytest.mark.parametrize("r", [0.5, 1.0, 1.2, 2.0])
@pytest.mark.parametrize("n", [64, 128])
def test_identities_exact_on_circles(r, n):
    errs = identity_errors(circle(r, n))
    assert set(errs) == set(IDENTITIES)
    assert max(errs.values()) <= 1e-8


def test_identities_exact_on_sphere():
    assert max(identity_errors(sphere_profile(1.5, 129)).values()) <= 1e-8


def test_identities_stationary_circle():
    errs = identity_errors(circle(math.sqrt(2.0), 128), absolute=True)
    assert max(errs.values()) <= 1e-9


def test_identity_orders_on_ellipse(ellipse_run):
    rep = verify_evolution_identities(ellipse_run, levels=(64, 128, 256))
    assert min(rep.spatial_order.values()) >= 1.8
    assert min(rep.temporal_order.values()) >= 0.9
    assert {r["identity"] for r in rep.rows()} == set(IDENTITIES)


def test_window_rates_contaminated(ellipse_run):
    tr = FlowTrajectory("RMCF", snapshots=ellipse_run.snapshots[:3], remesh_events=[ellipse_run.snapshots[1].time])
    with pytest.raises(ProbeContaminated):
        window_rates(tr, 1)
    with pytest.raises(InsufficientHistory):
        window_rates(tr, 0)


# ----------------------------------------------------------------------
# singularities


def test_fit_circle_exact():
    g = circle(0.3, 50, center=(1.0, -2.0))
    c, R, res = fit_circle(g.vertices)
    assert np.allclose(c, (1.0, -2.0), atol=1e-12)
    assert R == pytest.approx(0.3, rel=1e-12)
    assert res < 1e-12


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_decay_fit_synthetic(alpha):
    t = 1.0 - np.geomspace(1.0, 1e-4, 60)
    a, ci, T, used = decay_fit(t, 0.7 * (1.0 - t) ** alpha)
    assert a == pytest.approx(alpha, abs=1e-3)
    assert T == pytest.approx(1.0, abs=1e-5)
    assert ci[0] <= a <= ci[1]


def test_decay_fit_too_short():
    with pytest.raises(InsufficientHistory):
        decay_fit([0.0, 0.1, 0.2], [1.0, 0.9, 0.8])


def test_classify_mcf_circle(mcf_collapse):
    rep = detect_and_classify(mcf_collapse)
    assert (rep.tangent_type, rep.collapse_side) == ("round", "inside")
    assert rep.decay_exponent == pytest.approx(0.5, abs=0.02)
    assert rep.singular_time == pytest.approx(-0.5, abs=1e-3)
    assert np.hypot(*rep.singular_point) < 1e-3


def test_classify_rmcf_circle(collapse):
    rep = detect_and_classify(collapse)
    assert (rep.tangent_type, rep.collapse_side) == ("round", "inside")
    assert rep.template == "loop"


def test_classify_without_blowup():
    tr = run(FlowConfig("RMCF", circle(1.6, 64), t_max=0.1))
    assert detect_and_classify(tr).tangent_type == "unresolved"
