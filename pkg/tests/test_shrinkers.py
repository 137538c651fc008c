import math

import numpy as np
import pytest

from shrinkerlab.errors import NoSolutionInWindow
from shrinkerlab.geometry import circle, is_embedded, turning_number
from shrinkerlab.shrinkers import (
    ShrinkerSpec,
    abresch_langer_admissible,
    make_shrinker,
    round_shrinker,
    shoot_abresch_langer,
    shoot_angenent_torus,
    shrinker_residual,
)


@pytest.fixture(scope="module")
def torus512():
    return shoot_angenent_torus(ShrinkerSpec("angenent_torus", n_vertices=512))


# ----------------------------------------------------------------------
# round shrinkers


def test_round_circle():
    g = round_shrinker(1, 256)
    assert np.allclose(np.hypot(*g.vertices.T), math.sqrt(2.0), atol=1e-14)
    assert shrinker_residual(g) < 1e-10


def test_round_sphere():
    g = round_shrinker(2, 257)
    assert g.mode == "revolution" and g.capped
    assert np.allclose(np.hypot(*g.vertices.T), 2.0, atol=1e-14)
    assert shrinker_residual(g) < 1e-10


def test_round_sampling_does_not_change_radius():
    a, b = round_shrinker(1, 64), round_shrinker(1, 256)
    assert a.n_vertices != b.n_vertices
    assert np.ptp(np.hypot(*np.vstack([a.vertices, b.vertices]).T)) < 1e-14


def test_round_other_dimensions_rejected():
    with pytest.raises(ValueError):
        round_shrinker(3)


@pytest.mark.parametrize("r, expected", [(math.sqrt(2.0), 0.0), (1.0, 0.5)])
def test_residual_of_circles(r, expected):
    assert shrinker_residual(circle(r, 128)) == pytest.approx(expected, abs=1e-10)


# ----------------------------------------------------------------------
# Abresch-Langer curves


@pytest.mark.parametrize(
    "p, q, ok",
    [(2, 3, True), (3, 5, True), (4, 7, True), (1, 3, False), (3, 4, False), (1, 2, False), (2, 4, False)],
)
def test_admissible_window(p, q, ok):
    assert abresch_langer_admissible(p, q) is ok


def test_abresch_langer_2_3():
    res = shoot_abresch_langer(ShrinkerSpec("abresch_langer", p=2, q=3, n_vertices=4096))
    g = res.geometry
    assert g.immersed
    assert res.residual <= 1e-6
    assert turning_number(g) == 2
    # three petals: three local maxima of |x| around the curve
    rho = np.hypot(*g.vertices.T)
    peaks = (rho > np.roll(rho, 1)) & (rho >= np.roll(rho, -1))
    assert int(peaks.sum()) == 3
    assert res.info["radial_min"] < math.sqrt(2.0) < res.info["radial_max"]


def test_abresch_langer_3_5_turning_number():
    res = shoot_abresch_langer(ShrinkerSpec("abresch_langer", p=3, q=5, n_vertices=2048))
    assert turning_number(res.geometry) == 3
    assert res.residual <= 1e-6


@pytest.mark.parametrize("p, q", [(1, 3), (3, 4)])
def test_abresch_langer_outside_window(p, q):
    with pytest.raises(NoSolutionInWindow):
        shoot_abresch_langer(ShrinkerSpec("abresch_langer", p=p, q=q))


# ----------------------------------------------------------------------
# Angenent torus


def test_torus_profile_shape(torus512):
    g = torus512.geometry
    r_in, r_out = torus512.info["r_in"], torus512.info["r_out"]
    assert g.mode == "revolution" and not g.capped
    assert is_embedded(g)
    assert r_in < math.sqrt(2.0) < r_out
    assert np.min(g.vertices[:, 0]) == pytest.approx(r_in, abs=1e-6)
    assert np.max(g.vertices[:, 0]) == pytest.approx(r_out, abs=1e-6)


def test_torus_symmetric_in_z(torus512):
    v = torus512.geometry.vertices
    mirrored = v * np.array([1.0, -1.0])
    # every mirrored vertex lies on the profile polygon
    d = np.min(np.linalg.norm(mirrored[:, None, :] - v[None, :, :], axis=2), axis=1)
    h = float(np.max(torus512.geometry.derived.edge_lengths))
    assert np.max(d) < 0.6 * h


def test_torus_residual(torus512):
    assert torus512.residual <= 1e-5
    assert shrinker_residual(torus512.geometry) == pytest.approx(torus512.residual)


@pytest.mark.parametrize("factor", [0.9, 1.1])
def test_torus_guess_insensitive(torus512, factor):
    guess = factor * torus512.info["r_out"]
    res = shoot_angenent_torus(ShrinkerSpec("angenent_torus", n_vertices=512, initial_guess=guess))
    assert res.info["r_out"] == pytest.approx(torus512.info["r_out"], abs=1e-8)


def test_torus_residual_converges():
    ns = [256, 512, 1024]
    res = [shoot_angenent_torus(ShrinkerSpec("angenent_torus", n_vertices=n)).residual for n in ns]
    assert -np.polyfit(np.log(ns), np.log(res), 1)[0] >= 1.6


def test_make_shrinker_dispatch():
    r = make_shrinker(ShrinkerSpec("round", n=1, n_vertices=64))
    assert r.shooting_parameter == pytest.approx(math.sqrt(2.0))
    with pytest.raises(ValueError):
        ShrinkerSpec("catenoid")
