"""Closed self-shrinkers built by ODE shooting.

Curves are integrated in arclength with tangent angle ``theta``, so that
``x' = cos(theta)``, ``y' = sin(theta)`` and ``theta'`` is the curvature.  The
outward normal of a counterclockwise curve is ``(sin(theta), -cos(theta))``,
hence the shrinker equation ``H = <x, n>/2`` becomes

* planar curves:   ``theta' = (x sin(theta) - y cos(theta)) / 2``
* revolution profiles in (r, z):
  ``theta' = (r sin(theta) - z cos(theta)) / 2 - sin(theta) / r``

the last term being the rotational principal curvature ``n_r / r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import NoSolutionInWindow, ShootingBracketFailure
from .geometry import GeometrySnapshot, circle, sphere_profile

KINDS = ("round", "abresch_langer", "angenent_torus")

# Starting guess for the outer equatorial radius of the Angenent torus.  Only
# used to seed the bracket search; the converged value lives in the registry.
TORUS_OUTER_GUESS = 3.3


@dataclass(frozen=True)
class ShrinkerSpec:
    kind: str = "round"
    n: int = 1
    p: int = 2
    q: int = 3
    n_vertices: int = 1024
    tol: float = 1e-12
    initial_guess: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shrinker kind {self.kind!r}")


@dataclass
class ShootingResult:
    geometry: GeometrySnapshot
    shooting_parameter: float
    closure_error: float
    residual: float
    info: dict = field(default_factory=dict)


def shrinker_residual(geom: GeometrySnapshot) -> float:
    """Max over vertices of the rescaled mean curvature magnitude."""
    return float(np.max(np.abs(geom.Htilde)))


def round_shrinker(n: int, n_vertices: int = 1024) -> GeometrySnapshot:
    """The round shrinker S^n(sqrt(2n)) for n = 1 (circle) or n = 2 (sphere profile)."""
    if n == 1:
        g = circle(math.sqrt(2.0), n_vertices)
    elif n == 2:
        g = sphere_profile(2.0, n_vertices)
    else:
        raise ValueError("round shrinkers are available for n = 1 and n = 2")
    g.meta["kind"] = "round"
    return g


# ----------------------------------------------------------------------
# ODE right-hand sides


def _curve_rhs(s, y):
    x1, x2, th = y
    c, sn = math.cos(th), math.sin(th)
    return [c, sn, 0.5 * (x1 * sn - x2 * c)]


def _profile_rhs(s, y):
    r, z, th = y
    c, sn = math.cos(th), math.sin(th)
    return [c, sn, 0.5 * (r * sn - z * c) - sn / r]


def _integrate(rhs, y0, events, tol, dense=False, s_max=200.0):
    # a capped step keeps dense-output interpolation noise far below the
    # finite-difference truncation error of the sampled curve
    return solve_ivp(
        rhs,
        (0.0, s_max),
        y0,
        method="DOP853",
        rtol=max(0.1 * tol, 2.5e-14),
        atol=max(1e-3 * tol, 1e-16),
        events=events,
        dense_output=dense,
        max_step=0.01 if dense else np.inf,
    )


# ----------------------------------------------------------------------
# Abresch-Langer curves


def _radial_rate(s, y):
    return y[0] * math.cos(y[2]) + y[1] * math.sin(y[2])


def _radial_min(s, y):
    return _radial_rate(s, y)


_radial_min.terminal = True
_radial_min.direction = 1


def _radial_max(s, y):
    return _radial_rate(s, y)


_radial_max.terminal = True
_radial_max.direction = -1


def _al_period(rho0: float, tol: float):
    """Integrate from the radial maximum at (rho0, 0) to the next one.

    Returns the angular period, the arclength of one period and the two ODE
    solutions (to the radial minimum and from it to the next maximum).
    """
    first = _integrate(_curve_rhs, [rho0, 0.0, 0.5 * math.pi], [_radial_min], tol, dense=True)
    if first.status != 1:
        raise ShootingBracketFailure(f"no radial minimum found for rho0={rho0}")
    s1 = first.t_events[0][0]
    y1 = first.y_events[0][0]
    second = _integrate(_curve_rhs, y1, [_radial_max], tol, dense=True)
    if second.status != 1:
        raise ShootingBracketFailure(f"no radial maximum found for rho0={rho0}")
    s2 = second.t_events[0][0]
    y2 = second.y_events[0][0]
    period = y2[2] - 0.5 * math.pi
    return period, s1 + s2, (first, s1, second, s2, y2)


def _find_root(fun, lo, hi, tol):
    try:
        return brentq(fun, lo, hi, xtol=tol, rtol=4.0 * np.finfo(float).eps, maxiter=200)
    except ValueError as exc:
        raise ShootingBracketFailure("shooting function does not change sign on the bracket") from exc


def abresch_langer_admissible(p: int, q: int) -> bool:
    return 0.5 < p / q < 1.0 / math.sqrt(2.0)


def shoot_abresch_langer(spec: ShrinkerSpec) -> ShootingResult:
    """Closed immersed planar shrinker with turning number p and q petals.

    The radial maximum ``rho0`` is solved for (Brent) so that the angular period between
    consecutive radial maxima equals ``2 pi p / q``; the curve is then
    assembled from q rotated copies of one period.

    Raises
    ------
    NoSolutionInWindow
        ``p/q`` outside ``(1/2, 1/sqrt(2))``.
    ShootingBracketFailure
    """
    p, q = spec.p, spec.q
    if p <= 0 or q <= 0 or math.gcd(p, q) != 1:
        raise ValueError("p and q must be positive and coprime")
    if p == q:
        g = round_shrinker(1, spec.n_vertices)
        return ShootingResult(g, math.sqrt(2.0), 0.0, shrinker_residual(g), {"branch": "circle"})
    if not abresch_langer_admissible(p, q):
        raise NoSolutionInWindow(
            f"p/q = {p}/{q} is outside the admissible window (1/2, 1/sqrt(2))"
        )
    target = 2.0 * math.pi * p / q
    tol = spec.tol

    def shoot(rho0):
        return _al_period(rho0, tol)[0] - target

    lo = math.sqrt(2.0) * (1.0 + 1e-4)
    hi = 2.0
    while shoot(hi) > 0.0:
        lo, hi = hi, 1.5 * hi
        if hi > 50.0:
            raise ShootingBracketFailure("could not bracket the angular period")
    rho0 = _find_root(shoot, lo, hi, 1e-15)

    period, S, (first, s1, second, s2, y_end) = _al_period(rho0, tol)
    N = spec.n_vertices
    L = q * S
    s = np.arange(N) * (L / N)
    j = np.floor(s / S).astype(int)
    local = s - j * S
    pts = np.empty((N, 2))
    m1 = local <= s1
    pts[m1] = first.sol(local[m1])[:2].T
    pts[~m1] = second.sol(local[~m1] - s1)[:2].T
    ang = j * period
    c, sn = np.cos(ang), np.sin(ang)
    pts = np.column_stack([c * pts[:, 0] - sn * pts[:, 1], sn * pts[:, 0] + c * pts[:, 1]])

    ca, sa = math.cos((q - 1) * period), math.sin((q - 1) * period)
    end = np.array([ca * y_end[0] - sa * y_end[1], sa * y_end[0] + ca * y_end[1]])
    closure = float(np.hypot(*(end - np.array([rho0, 0.0]))))

    g = GeometrySnapshot(pts, mode="curve", immersed=True)
    g.meta["kind"] = "abresch_langer"
    radial_min = float(np.hypot(*first.y_events[0][0][:2]))
    info = {
        "p": p,
        "q": q,
        "angular_period": period,
        "period_arclength": S,
        "radial_max": rho0,
        "radial_min": radial_min,
    }
    return ShootingResult(g, rho0, closure, shrinker_residual(g), info)


# ----------------------------------------------------------------------
# Angenent torus


def _z_down(s, y):
    return y[1]


_z_down.terminal = True
_z_down.direction = -1


def _near_axis(s, y):
    return y[0] - 1e-3


_near_axis.terminal = True


def _torus_half(r0: float, tol: float, dense=False):
    sol = _integrate(_profile_rhs, [r0, 0.0, 0.5 * math.pi], [_z_down, _near_axis], tol, dense=dense)
    if sol.status != 1 or sol.t_events[0].size == 0:
        return None
    return sol


def _torus_mismatch(r0: float, tol: float):
    sol = _torus_half(r0, tol)
    if sol is None:
        return None
    return math.cos(sol.y_events[0][0][2])


def _torus_bracket(guess: float, tol: float):
    """Walk outward from ``guess`` until the shooting mismatch changes sign."""
    step = 0.02 * guess
    prev = {}
    for k in range(0, 60):
        for sign in (1, -1):
            r = guess + sign * k * step
            if r <= math.sqrt(2.0) * 1.01:
                continue
            val = _torus_mismatch(r, tol)
            nb = guess + sign * (k - 1) * step if k > 0 else None
            if val is not None and nb is not None and prev.get(nb) is not None:
                if val * prev[nb] < 0.0:
                    return (min(r, nb), max(r, nb))
            prev[r] = val
    raise ShootingBracketFailure("no sign change of the torus shooting mismatch near the guess")


def shoot_angenent_torus(spec: ShrinkerSpec) -> ShootingResult:
    """Embedded rotationally symmetric torus shrinker in R^3 (profile in the (r, z) plane).

    The profile leaves the outer equator ``(r0, 0)`` vertically and ``r0`` is
    solved for (Brent) so that it meets ``z = 0`` again with vertical tangent; the lower
    half is the mirror image.

    Raises
    ------
    ShootingBracketFailure
    """
    tol = spec.tol
    guess = spec.initial_guess if spec.initial_guess is not None else TORUS_OUTER_GUESS
    lo, hi = _torus_bracket(guess, tol)

    def shoot(r0):
        val = _torus_mismatch(r0, tol)
        if val is None:
            raise ShootingBracketFailure(f"trajectory from r0={r0} hit the axis")
        return val

    r0 = _find_root(shoot, lo, hi, 1e-15)
    sol = _torus_half(r0, tol, dense=True)
    S = sol.t_events[0][0]
    y_end = sol.y_events[0][0]
    N = spec.n_vertices
    s = np.arange(N) * (2.0 * S / N)
    upper = s <= S
    pts = sol.sol(np.where(upper, s, 2.0 * S - s))[:2].T.copy()
    pts[~upper, 1] *= -1.0
    closure = abs(math.cos(y_end[2])) + abs(y_end[1])
    g = GeometrySnapshot(pts, mode="revolution")
    g.meta["kind"] = "angenent_torus"
    info = {
        "r_out": r0,
        "r_in": float(y_end[0]),
        "half_arclength": S,
        "z_max": float(np.max(pts[:, 1])),
    }
    return ShootingResult(g, r0, closure, shrinker_residual(g), info)


def make_shrinker(spec: ShrinkerSpec) -> ShootingResult:
    if spec.kind == "round":
        g = round_shrinker(spec.n, spec.n_vertices)
        rad = math.sqrt(2.0 * spec.n)
        return ShootingResult(g, rad, 0.0, shrinker_residual(g), {"radius": rad})
    if spec.kind == "abresch_langer":
        return shoot_abresch_langer(spec)
    return shoot_angenent_torus(spec)
