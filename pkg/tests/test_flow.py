import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shrinkerlab import _kernels
from shrinkerlab.diagnostics import hausdorff_distance
from shrinkerlab.errors import InsufficientHistory, NumericalBlowup
from shrinkerlab.flow import (
    FlowConfig,
    FlowTrajectory,
    RescalingSpec,
    estimate_singular_time,
    parabolic_rescale,
    redistribute,
    rescaled_velocity,
    rmcf_to_mcf,
    run,
    stable_dt,
    step,
)
from shrinkerlab.geometry import GeometrySnapshot, circle, sphere_profile


def radii(g):
    return np.hypot(*g.vertices.T)


@pytest.fixture(scope="module")
def collapse128():
    return run(FlowConfig("RMCF", circle(1.0, 128), t_max=2.0, output_dt=0.01))


# ----------------------------------------------------------------------
# single steps


@pytest.mark.parametrize("dt", [1e-4, 1e-2, 0.5])
def test_step_stationary_circle(dt):
    g = circle(math.sqrt(2.0), 128)
    new = step(g, dt, "RMCF")
    assert np.max(np.abs(new.vertices - g.vertices)) < 1e-10


def test_step_mcf_circle():
    new = step(circle(1.0, 256), 1e-4, "MCF")
    assert np.allclose(radii(new), math.sqrt(1 - 2e-4), atol=1e-8)


def test_step_rmcf_circle():
    new = step(circle(1.0, 256), 1e-4, "RMCF")
    assert np.allclose(radii(new), math.sqrt(2 - math.exp(1e-4)), atol=1e-8)
    assert new.time == pytest.approx(1e-4)


def test_step_sphere_profile_mcf():
    # sphere of radius R under MCF: R^2 = R0^2 - 4 t
    new = step(sphere_profile(2.0, 257), 1e-4, "MCF")
    assert np.allclose(radii(new), math.sqrt(4 - 4e-4), atol=1e-7)
    assert new.capped


def test_step_non_finite():
    g = circle(1.0, 64)
    with pytest.raises(NumericalBlowup):
        step(g, float("inf"), "MCF")


def test_redistribute_equalizes_spacing():
    # short-wavelength spacing error; long waves are left to the spline remesh
    t = 2 * np.pi * np.arange(128) / 128
    t = t + 0.3 * (2 * np.pi / 128) * np.sin(16 * t)
    g = GeometrySnapshot(np.column_stack([np.cos(t), np.sin(t)]))
    h0 = np.ptp(g.derived.edge_lengths)
    for _ in range(50):
        g = redistribute(g)
    assert np.ptp(g.derived.edge_lengths) < 0.1 * h0
    # tangential motion keeps vertices on the circle to third order
    assert np.max(np.abs(radii(g) - 1.0)) < 1e-6


def test_stable_dt_scales_with_h_squared():
    a, b = stable_dt(circle(1.0, 128)), stable_dt(circle(1.0, 256))
    assert a / b == pytest.approx(4.0, rel=1e-3)


def test_kernel_step_matches_numpy_step():
    g = circle(1.0, 128)
    dt = stable_dt(g, 0.4)
    ref = step(g, dt, "RMCF")
    hist = [np.empty(1) for _ in range(3)]
    x, t, k, status, used = _kernels.advance(
        np.ascontiguousarray(g.vertices), 0.0, False, False, False, 0.4, 0.5, 0.0, 1.0, 1e9, 1, 0.0, 1.0, *hist
    )
    assert k == 1 and used == pytest.approx(dt, rel=1e-14)
    assert np.max(np.abs(x - ref.vertices)) < 1e-14


# ----------------------------------------------------------------------
# runs


def test_circle_collapse_time(collapse128):
    tr = collapse128
    assert tr.termination == "blow_up"
    assert tr.singular_time == pytest.approx(math.log(2.0), abs=1e-3)
    # r^2 = 2 - e^t at every stored slice, up to the O(dt) shift of the clock
    for g in tr.snapshots:
        assert np.mean(radii(g) ** 2) == pytest.approx(2 - math.exp(g.time), abs=1e-3)


def test_circle_collapse_richardson():
    # the error in T is O(h^2); extrapolate with ratio 4
    Ts = [run(FlowConfig("RMCF", circle(1.0, n), t_max=2.0, output_dt=0.01)).singular_time for n in (64, 128)]
    extrapolated = Ts[1] + (Ts[1] - Ts[0]) / 3.0
    assert abs(extrapolated - math.log(2.0)) < abs(Ts[1] - math.log(2.0))
    assert extrapolated == pytest.approx(math.log(2.0), abs=1e-4)


@pytest.mark.parametrize("dt_max, rtol", [(0.01, 2e-3), (0.001, 1e-3)])
def test_circle_expand(dt_max, rtol):
    tr = run(FlowConfig("RMCF", circle(1.6, 128), t_max=3.0, dt_max=dt_max))
    assert tr.termination == "reached_t_max"
    assert tr.snapshots[-1].time == pytest.approx(3.0)
    r = np.mean(radii(tr.snapshots[-1]))
    assert r == pytest.approx(math.sqrt(2 + 0.56 * math.exp(3.0)), rel=rtol)
    assert r == pytest.approx(3.64, abs=0.01)


def test_stationary_circle_run():
    tr = run(FlowConfig("RMCF", circle(math.sqrt(2.0), 128), t_max=1.0))
    assert tr.termination == "reached_t_max"
    assert np.max(np.abs(radii(tr.snapshots[-1]) - math.sqrt(2.0))) < 1e-10


def test_stationary_circle_long_run():
    tr = run(FlowConfig("RMCF", circle(math.sqrt(2.0), 64), t_max=600.0, output_dt=60.0))
    assert len(tr.step_times) >= 100_000
    assert np.max(np.abs(radii(tr.snapshots[-1]) - math.sqrt(2.0))) < 1e-6


def observed_orders(errors, ratio=2.0):
    e = np.asarray(errors)
    return np.log(e[:-1] / e[1:]) / math.log(ratio)


def test_collapse_time_order_in_dt():
    # the stencil is exact on circles, so only the time step contributes
    errs = [run(FlowConfig("RMCF", circle(1.0, 128), t_max=2.0, output_dt=0.01, cfl=c)).singular_time - math.log(2.0) for c in (0.4, 0.2, 0.1)]
    assert all(e > 0 for e in errs)
    assert np.all(observed_orders(errs) >= 0.95)


def test_collapse_time_order_in_h():
    errs = [run(FlowConfig("RMCF", circle(1.0, n), t_max=2.0, output_dt=0.01)).singular_time - math.log(2.0) for n in (64, 128, 256)]
    assert np.all(observed_orders(errs) >= 1.9)


@pytest.mark.parametrize("r0, dt_max", [(1.0, 0.01), (0.8, 0.01), (1.6, 1e-4)])
def test_mcf_and_transported_rmcf_agree(r0, dt_max):
    start = circle(r0, 128)
    if r0 < math.sqrt(2.0):
        tau_star = -1.0 + r0 * r0 / 2.0
        taus = [-1.0 + f * (tau_star + 1.0) for f in (0.3, 0.9)]
    else:
        taus = [-0.5, -math.exp(-2.0)]
    for tau in taus:
        t = -math.log(-tau)
        rescaled = run(FlowConfig("RMCF", start, t_max=t, dt_max=dt_max))
        direct = run(FlowConfig("MCF", start, t_max=tau + 1.0, dt_max=dt_max))
        moved = rmcf_to_mcf(rescaled).snapshots[-1]
        assert moved.time == pytest.approx(direct.snapshots[-1].time, abs=1e-12)
        assert hausdorff_distance(moved, direct.snapshots[-1]) <= 1e-4


def test_mcf_circle_from_minus_one():
    tr = run(FlowConfig("MCF", circle(1.0, 128), t_max=1.0, output_dt=0.01))
    assert tr.snapshots[0].time == -1.0
    assert tr.termination == "blow_up"
    assert tr.singular_time == pytest.approx(-0.5, abs=1e-3)


def test_output_grid_and_growth(collapse128):
    t = collapse128.times
    assert np.all(np.diff(t) > 0)
    on_grid = np.isclose(np.round(t / 0.01) * 0.01, t, atol=1e-12)
    assert on_grid.sum() >= 60
    a = np.array([r["max_A"] for r in collapse128.records])
    assert np.all(a[1:] / a[:-1] <= 1.05 * 1.01)


def test_run_is_deterministic():
    cfg = FlowConfig("RMCF", circle(1.0, 64), t_max=0.3, output_dt=0.05)
    a, b = run(cfg), run(cfg)
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.snapshots, b.snapshots))


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig("CSF", circle(1.0, 64), t_max=1.0)
    with pytest.raises(ValueError):
        FlowConfig("RMCF", circle(1.0, 64), t_max=0.0)
    with pytest.raises(ValueError):
        FlowConfig("RMCF", circle(0.01, 64), t_max=1.0, a_max=50.0)


def test_estimate_singular_time_on_exact_data():
    t = np.linspace(0.55, 0.69, 30)
    a = 1.0 / np.sqrt(2 - np.exp(t))
    assert estimate_singular_time(t, a) == pytest.approx(math.log(2.0), abs=1e-4)


def test_interpolation_in_time(collapse128):
    g = collapse128.snapshots[10]
    assert np.allclose(collapse128.at(g.time), g.vertices, atol=1e-12)
    with pytest.raises(InsufficientHistory):
        collapse128.at(5.0)


# ----------------------------------------------------------------------
# transformations


def test_rmcf_to_mcf(collapse128):
    m = rmcf_to_mcf(collapse128)
    assert m.mode == "MCF"
    assert m.snapshots[0].time == -1.0
    assert np.array_equal(m.snapshots[0].vertices, collapse128.snapshots[0].vertices)
    assert m.singular_time == pytest.approx(-math.exp(-collapse128.singular_time))
    assert m.singular_time == pytest.approx(-0.5, abs=1e-3)
    # r(tau)^2 = -2 tau - 1 for the transported circle
    for g in m.snapshots:
        assert np.mean(radii(g) ** 2) == pytest.approx(-2 * g.time - 1, abs=1e-3)


def test_rmcf_to_mcf_single_slice():
    # the exact RMCF circle at t = ln(4/3) lands at tau = -0.75 with radius 1/sqrt(2)
    t = math.log(4.0 / 3.0)
    tr = FlowTrajectory("RMCF", snapshots=[circle(math.sqrt(2 - math.exp(t)), 64, time=t)])
    g = rmcf_to_mcf(tr).snapshots[0]
    assert g.time == pytest.approx(-0.75, abs=1e-15)
    assert np.allclose(radii(g), 0.7071, atol=1e-4)


def test_rmcf_to_mcf_requires_rmcf():
    with pytest.raises(ValueError):
        rmcf_to_mcf(FlowTrajectory("MCF"))


def test_parabolic_rescale_identity(collapse128):
    r = parabolic_rescale(collapse128, RescalingSpec(1.0))
    for a, b in zip(r.snapshots, collapse128.snapshots):
        assert np.array_equal(a.vertices, b.vertices) and a.time == b.time


def test_parabolic_rescale_near_collapse():
    tr = run(FlowConfig("MCF", circle(1.0, 128), t_max=1.0, output_dt=0.005))
    sigma = 10.0
    T = tr.singular_time
    r = parabolic_rescale(tr, RescalingSpec(sigma, (0.0, 0.0), T), window=0.5)
    assert len(r) > 3
    for g in r.snapshots:
        # MCF circle: sigma * sqrt(2 (T - t)) in rescaled variables is sqrt(-2 s)
        if g.time < -1e-3:
            assert np.mean(radii(g)) == pytest.approx(math.sqrt(-2.0 * g.time), rel=0.02)


def test_parabolic_rescale_window_outside():
    tr = run(FlowConfig("MCF", circle(1.0, 64), t_max=0.2))
    with pytest.raises(InsufficientHistory):
        parabolic_rescale(tr, RescalingSpec(2.0, T=0.0), window=100.0)


def test_rescaled_velocity_matches_finite_difference():
    # RMCF circle viewed through sigma = 2: compare the predicted speed with a
    # centred difference of the rescaled radius
    sigma = 2.0
    spec = RescalingSpec(sigma)
    tr = run(FlowConfig("RMCF", circle(1.0, 256), t_max=0.2, output_dt=0.01))
    r = parabolic_rescale(tr, spec)
    k = 10
    a, b, c = r.snapshots[k - 1], r.snapshots[k], r.snapshots[k + 1]
    fd = -(np.mean(radii(c)) - np.mean(radii(a))) / (c.time - a.time)
    pred = float(np.mean(rescaled_velocity(b, spec)))
    assert fd == pytest.approx(pred, rel=1e-3)


@settings(max_examples=15, deadline=None)
@given(r0=st.floats(0.6, 1.3))
def test_rmcf_circle_htilde_positive_until_collapse(r0):
    tr = run(FlowConfig("RMCF", circle(r0, 128), t_max=3.0, output_dt=0.05))
    assert tr.termination == "blow_up"
    assert all(g.Htilde.min() > 0 for g in tr.snapshots)
    assert tr.singular_time == pytest.approx(math.log(2 / (2 - r0 * r0)), abs=5e-3)
