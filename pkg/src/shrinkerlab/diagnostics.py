"""Verification instruments for rescaled mean curvature flow runs.

* sign preservation of the rescaled mean curvature along a run
* rescaled non-collapsing: the two-point function ``Ztilde`` and the
  optimal ball constant ``delta`` on both sides, plus the curvature pinching
  it implies
* the avoidance principle for pairs of MCF runs
* nestedness of the time slices of a run
* finite-difference checks of the evolution equations of g, det g, n, H, T
  and Htilde
* singularity detection: location, time, collapsing rate, tangent flow type
  and collapse side

For surfaces of revolution the two-point scans run over pairs of points of
the surface.  Rotating the second point about the axis changes both
``|y - x|^2`` and ``<y - x, n(x)>`` linearly in ``cos(phi)``, so every ratio or
linear combination of them is extremal at ``cos(phi) = +-1``: the profile and
its mirror image ``(-r, z)`` are enough.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from . import _kernels
from .errors import InsufficientHistory, MixedSign, NotDisjoint, ProbeContaminated
from .flow import FlowTrajectory, estimate_singular_time
from .geometry import GeometrySnapshot, fourier_resample, point_segment_distance, resample, side_of_many

# ----------------------------------------------------------------------
# rescaled non-collapsing


@dataclass
class NonCollapseReport:
    delta_in: float
    delta_out: float
    min_Ztilde: float
    argmin: tuple
    sign: int
    time: float = 0.0

    @property
    def delta_two_sided(self) -> float:
        return min(self.delta_in, self.delta_out)


def _partner_points(geom: GeometrySnapshot) -> np.ndarray:
    """Points y of the hypersurface that realise the two-point extrema."""
    if geom.mode != "revolution":
        return geom.vertices
    p = geom.closed_curve()
    if geom.capped:
        return p
    return np.vstack([p, p * np.array([-1.0, 1.0])])


def ztilde(geom: GeometrySnapshot, delta: float, i: int, j: int) -> float:
    """``Ztilde(x_i, x_j) = Htilde(x_i)/2 |x_j - x_i|^2 + delta <x_j - x_i, n(x_i)>``."""
    v = geom.vertices
    d = v[j] - v[i]
    return float(0.5 * geom.Htilde[i] * (d @ d) + delta * (d @ geom.normal[i]))


def _sign_of(geom):
    ht = geom.Htilde
    if np.all(ht > 0.0):
        return 1
    if np.all(ht < 0.0):
        return -1
    raise MixedSign(f"Htilde changes sign (min {ht.min():.3e}, max {ht.max():.3e})")


def noncollapse_delta(geom: GeometrySnapshot, block: int = 256) -> NonCollapseReport:
    """Optimal rescaled non-collapsing constants of a hypersurface with one-signed Htilde.

    ``delta_in`` is the largest delta such that every point has a ball of
    radius ``delta/|Htilde|`` inside the enclosed region touching it there;
    ``delta_out`` is the same for the unbounded side.  Both are minima of
    ``|Htilde(x)| |y - x|^2 / (2 |<y - x, n(x)>|)`` over the pairs on the
    respective side, together with the coincident-point limits
    ``|Htilde| / k`` for every principal curvature ``k`` bending toward that
    side.

    ``min_Ztilde`` is the minimum over all pairs of ``sign(Htilde) Ztilde``
    evaluated at ``delta = sign(Htilde) delta_in``, which vanishes at the
    optimum.

    Raises
    ------
    MixedSign
    """
    sign = _sign_of(geom)
    v = geom.vertices
    n = geom.normal
    aht = np.abs(geom.Htilde)
    ys = _partner_points(geom)

    best = {"in": (np.inf, None), "out": (np.inf, None)}
    for a in range(0, len(v), block):
        idx = np.arange(a, min(a + block, len(v)))
        d = ys[None, :, :] - v[idx, None, :]
        dd = np.einsum("ijk,ijk->ij", d, d)
        p = np.einsum("ijk,ik->ij", d, n[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = aht[idx, None] * dd / (2.0 * np.abs(p))
        for side, mask in (("in", p < 0.0), ("out", p > 0.0)):
            vals = np.where(mask, q, np.inf)
            k = int(np.argmin(vals))
            if vals.flat[k] < best[side][0]:
                best[side] = (float(vals.flat[k]), (int(idx[k // len(ys)]), int(k % len(ys))))

    # coincident-point limits from the principal curvatures
    curvatures = [geom.kappa]
    if geom.mode == "revolution":
        curvatures.append(geom.derived.rot_curvature)
    for k in curvatures:
        with np.errstate(divide="ignore"):
            lim_in = np.where(k > 0.0, aht / np.abs(k), np.inf)
            lim_out = np.where(k < 0.0, aht / np.abs(k), np.inf)
        for side, lim in (("in", lim_in), ("out", lim_out)):
            i = int(np.argmin(lim))
            if lim[i] < best[side][0]:
                best[side] = (float(lim[i]), (i, i))

    delta_in, arg = best["in"]
    delta_out = best["out"][0]
    # Ztilde at the optimum, sign-normalised so that non-collapsing reads >= 0
    dsigned = sign * delta_in
    zmin = np.inf
    for a in range(0, len(v), block):
        idx = np.arange(a, min(a + block, len(v)))
        d = ys[None, :, :] - v[idx, None, :]
        z = 0.5 * geom.Htilde[idx, None] * np.einsum("ijk,ijk->ij", d, d) + dsigned * np.einsum(
            "ijk,ik->ij", d, n[idx]
        )
        zmin = min(zmin, float(np.min(sign * z)))
    return NonCollapseReport(delta_in, delta_out, zmin, arg if arg is not None else (-1, -1), sign, geom.time)


def delta_series(traj: FlowTrajectory, every: int = 1):
    """``noncollapse_delta`` at every ``every``-th stored slice; returns (times, reports)."""
    snaps = traj.snapshots[::every]
    return np.array([g.time for g in snaps]), [noncollapse_delta(g) for g in snaps]


@dataclass
class PinchingResult:
    ratio: float
    passed: bool
    delta: float
    asymmetric_display_ratio: float


def pinching_check(geom: GeometrySnapshot, report: NonCollapseReport | None = None, tol: float = 1e-6) -> PinchingResult:
    """Curvature pinching implied by two-sided non-collapsing.

    Returns ``max_i |k_i| delta / |Htilde_i|`` over all principal curvatures
    ``k`` with ``delta = min(delta_in, delta_out)``; it passes when the ratio
    is at most ``1 + tol``.  The ratio of the largest principal curvature to
    ``delta |Htilde|`` (the upper bound of the asymmetric form in which the
    estimate is sometimes displayed) is returned alongside for comparison.
    """
    if report is None:
        report = noncollapse_delta(geom)
    delta = report.delta_two_sided
    aht = np.abs(geom.Htilde)
    ks = [geom.kappa]
    if geom.mode == "revolution":
        ks.append(geom.derived.rot_curvature)
    kmax = np.max(np.abs(np.vstack(ks)), axis=0)
    kup = np.max(np.vstack(ks), axis=0)
    ratio = float(np.max(kmax * delta / aht))
    asym = float(np.max(kup / (delta * aht)))
    return PinchingResult(ratio, ratio <= 1.0 + tol, delta, asym)


# ----------------------------------------------------------------------
# sign preservation, nestedness, avoidance


@dataclass
class SignReport:
    initial_label: str
    times: np.ndarray
    min_Htilde: np.ndarray
    max_Htilde: np.ndarray
    violations: int
    passed: bool | None

    @property
    def skipped(self) -> bool:
        return self.passed is None


def sign_preservation(traj: FlowTrajectory) -> SignReport:
    """Check that the sign of Htilde at the initial slice persists at every stored slice.

    An initial slice with mixed (or vanishing) Htilde is reported as skipped.
    """
    times = traj.times
    lo = np.array([float(g.Htilde.min()) for g in traj.snapshots])
    hi = np.array([float(g.Htilde.max()) for g in traj.snapshots])
    if lo[0] > 0.0:
        label, bad = "rescaled_mean_convex", lo <= 0.0
    elif hi[0] < 0.0:
        label, bad = "rescaled_mean_concave", hi >= 0.0
    else:
        return SignReport("neither", times, lo, hi, 0, None)
    v = int(bad.sum())
    return SignReport(label, times, lo, hi, v, v == 0)


@dataclass
class NestednessReport:
    direction: str
    pairs_checked: int
    violations: int
    passed: bool
    worst: tuple = ()


def nestedness_check(traj: FlowTrajectory, direction: str, refine: int = 4, all_pairs: bool = False) -> NestednessReport:
    """Every slice lies weakly inside (``direction="inward"``) or outside each earlier one.

    The earlier slice is refined by spline resampling to ``refine`` times its
    vertex count before the point-in-region test, so chord sagitta does not
    register as a violation.  Consecutive slices suffice since the enclosed
    regions are then nested by transitivity; ``all_pairs`` checks every pair.
    """
    if direction not in ("inward", "outward"):
        raise ValueError("direction must be 'inward' or 'outward'")
    allowed = {"inside", "on-boundary"} if direction == "inward" else {"outside", "on-boundary"}
    snaps = traj.snapshots
    checked = 0
    violations = 0
    worst = ()
    for k in range(1, len(snaps)):
        earlier = range(k) if all_pairs else [k - 1]
        for j in earlier:
            ref = resample(snaps[j], refine * snaps[j].n_vertices)
            labels = side_of_many(ref, snaps[k].vertices)
            bad = int(sum(lab not in allowed for lab in labels))
            checked += 1
            if bad:
                violations += bad
                worst = worst or (j, k, bad)
    return NestednessReport(direction, checked, violations, violations == 0, worst)


def polyline_distance(a: GeometrySnapshot, b: GeometrySnapshot, refine: int = 4) -> float:
    """Minimal distance between two closed curves (profiles for revolution mode).

    Both curves are first refined ``refine`` times by trigonometric
    interpolation, which cuts the chord sag of the polylines by ``refine**2``.
    """
    if refine > 1:
        a = fourier_resample(a, refine * a.n_vertices - (refine - 1) * a.capped)
        b = fourier_resample(b, refine * b.n_vertices - (refine - 1) * b.capped)
    pa, pb = a.closed_curve(), b.closed_curve()
    d1 = point_segment_distance(pa, pb, np.roll(pb, -1, axis=0)).min()
    d2 = point_segment_distance(pb, pa, np.roll(pa, -1, axis=0)).min()
    return float(min(d1, d2))


def hausdorff_distance(a: GeometrySnapshot, b: GeometrySnapshot, refine: int = 4) -> float:
    """Symmetric Hausdorff distance between two closed curves, refined as in ``polyline_distance``."""
    if refine > 1:
        a = fourier_resample(a, refine * a.n_vertices - (refine - 1) * a.capped)
        b = fourier_resample(b, refine * b.n_vertices - (refine - 1) * b.capped)
    pa, pb = a.closed_curve(), b.closed_curve()
    d1 = point_segment_distance(pa, pb, np.roll(pb, -1, axis=0)).max()
    d2 = point_segment_distance(pb, pa, np.roll(pa, -1, axis=0)).max()
    return float(max(d1, d2))


def _polylines_cross(pa, pb) -> bool:
    a0, a1 = pa, np.roll(pa, -1, axis=0)
    b0, b1 = pb, np.roll(pb, -1, axis=0)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    A0, A1 = a0[:, None, :], a1[:, None, :]
    B0, B1 = b0[None, :, :], b1[None, :, :]
    o1 = orient(A0, A1, B0)
    o2 = orient(A0, A1, B1)
    o3 = orient(B0, B1, A0)
    o4 = orient(B0, B1, A1)
    return bool(np.any((o1 * o2 <= 0.0) & (o3 * o4 <= 0.0)))


@dataclass
class AvoidanceReport:
    times: np.ndarray
    distances: np.ndarray
    d0: float
    tolerance: float
    passed: bool

    @property
    def min_margin(self) -> float:
        return float(np.min(self.distances - self.d0))


def avoidance_check(traj_a: FlowTrajectory, traj_b: FlowTrajectory, tol: float = 1e-3) -> AvoidanceReport:
    """Minimal distance between two MCF runs at their common stored times.

    Passes when the distance never drops below ``d(0) - tol``.

    Raises
    ------
    NotDisjoint
        The initial slices touch or cross.
    """
    if traj_a.mode != "MCF" or traj_b.mode != "MCF":
        raise ValueError("avoidance_check needs two MCF trajectories")
    ga, gb = traj_a.snapshots[0], traj_b.snapshots[0]
    d0 = polyline_distance(ga, gb)
    if d0 <= 0.0 or _polylines_cross(ga.closed_curve(), gb.closed_curve()):
        raise NotDisjoint("initial hypersurfaces intersect")
    tb = traj_b.times
    times, dist = [], []
    for g in traj_a.snapshots:
        k = int(np.argmin(np.abs(tb - g.time)))
        if abs(tb[k] - g.time) <= 1e-9 * max(1.0, abs(g.time)):
            times.append(g.time)
            dist.append(polyline_distance(g, traj_b.snapshots[k]))
    times, dist = np.array(times), np.array(dist)
    return AvoidanceReport(times, dist, d0, tol, bool(np.all(dist >= d0 - tol)))


# ----------------------------------------------------------------------
# evolution identities


IDENTITIES = ("metric", "det_metric", "normal", "H", "T", "Htilde")


def _d1(f):
    """Fourth-order centred derivative in the vertex index on a periodic array."""
    r = lambda k: np.roll(f, -k, axis=0)  # noqa: E731
    return (8.0 * (r(1) - r(-1)) - (r(2) - r(-2))) / 12.0


def _quantities(geom: GeometrySnapshot):
    """Tracked quantities and the time derivatives predicted for them under RMCF.

    Returns two dicts keyed by identity name, one row per vertex.  Derivatives
    in the vertex index ``u`` use fourth-order centred stencils on the closed
    (for capped profiles: mirrored) curve; the metric is ``|x_u|^2`` and the
    Laplacian of a rotationally symmetric function is ``(w u_s)_s / w`` with
    ``w = r`` for profiles.
    """
    p = geom.closed_curve()
    m = len(p)
    n_own = geom.n_vertices
    d = geom.derived
    kap, H, Ht, A2 = d.kappa, d.H, d.Htilde, d.A2
    nor, tan = d.normal, d.tangent
    if geom.capped:
        ext = lambda f, parity=1.0: np.concatenate([f, parity * f[-2:0:-1]])  # noqa: E731
    else:
        ext = lambda f, parity=1.0: f  # noqa: E731

    xu = _d1(p)
    speed = np.hypot(xu[:, 0], xu[:, 1])
    Ht_full = ext(Ht)
    dHt = _d1(Ht_full) / speed  # derivative along arclength
    if geom.mode == "revolution":
        w = p[:, 0]
    else:
        w = np.ones(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        lap = _d1(w * dHt) / (speed * w)
    sl = slice(0, n_own)
    x = geom.vertices
    g = speed[sl] ** 2
    grad = dHt[sl, None] * tan
    lap = lap[sl]
    dHt_own = dHt[sl]
    lhs = {
        "metric": g,
        "det_metric": g * (x[:, 0] ** 2 if geom.mode == "revolution" else 1.0),
        "normal": nor,
        "H": H,
        "T": -0.5 * np.einsum("ij,ij->i", x, nor),
        "Htilde": Ht,
    }
    rhs = {
        "metric": -2.0 * Ht * kap * g,
        "det_metric": -2.0 * Ht * H * lhs["det_metric"],
        "normal": grad,
        "H": lap + A2 * Ht,
        "T": 0.5 * Ht - 0.5 * np.einsum("ij,ij->i", x, tan) * dHt_own,
        "Htilde": lap - 0.5 * np.einsum("ij,ij->i", x, tan) * dHt_own + (0.5 + A2) * Ht,
    }
    return lhs, rhs


def _interior_mask(geom):
    m = np.ones(geom.n_vertices, dtype=bool)
    if geom.capped:
        m[:2] = m[-2:] = False
    return m


def _flat(q):
    return np.asarray(q).reshape(len(q), -1)


def _displace(geom, eps, V):
    v = geom.vertices - eps * V[:, None] * geom.normal
    if geom.capped:
        v[0, 0] = v[-1, 0] = 0.0
    return geom.with_vertices(v)


def semidiscrete_rates(geom: GeometrySnapshot, eps: float | None = None) -> dict:
    """Exact time derivative of the tracked quantities under the semi-discrete flow.

    Fourth-order centred differences along the normal velocity field with a
    step ``eps`` in time, so only the spatial discretization is left.  The
    default step is a fixed fraction of the curvature time scale ``1/|A|^2``,
    which balances truncation against rounding.
    """
    if eps is None:
        eps = 3e-3 * min(1.0, 1.0 / float(np.max(geom.A2)))
    V = geom.Htilde
    vals = {}
    for k, c in ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)):
        lhs, _ = _quantities(_displace(geom, k * eps, V))
        for name in IDENTITIES:
            vals[name] = vals.get(name, 0.0) + c * _flat(lhs[name])
    return {name: vals[name] / (12.0 * eps) for name in IDENTITIES}


def identity_scales(geom: GeometrySnapshot, lhs: dict, rhs: dict, mask) -> dict:
    """Natural size of each rate, used to make errors relative.

    The larger of the right side itself and a bound built from ``max|Htilde|``,
    ``max|A|`` and ``max|x|``, so identities whose right side vanishes (the
    gradient terms on a circle) are still measured against a meaningful scale.
    """
    ht = float(np.max(np.abs(geom.Htilde[mask])))
    a = math.sqrt(float(np.max(geom.A2[mask])))
    x = float(np.max(np.hypot(*geom.vertices[mask].T)))
    bound = {
        "metric": 2.0 * ht * a * float(np.max(lhs["metric"][mask])),
        "det_metric": 2.0 * ht * a * float(np.max(lhs["det_metric"][mask])),
        "normal": ht * a,
        "H": ht * a * a,
        "T": 0.5 * ht * (1.0 + x * a),
        "Htilde": ht * (0.5 + a * a + x * a),
    }
    return {name: max(float(np.max(np.abs(_flat(rhs[name])[mask]))), bound[name], 1e-300) for name in IDENTITIES}


def identity_errors(geom: GeometrySnapshot, absolute: bool = False) -> dict:
    """Max-norm gap between semi-discrete rates and predicted right sides.

    Relative to :func:`identity_scales` unless ``absolute``.
    """
    rates = semidiscrete_rates(geom)
    lhs, rhs = _quantities(geom)
    mask = _interior_mask(geom)
    scales = identity_scales(geom, lhs, rhs, mask)
    out = {}
    for name in IDENTITIES:
        err = float(np.max(np.abs(_flat(rates[name])[mask] - _flat(rhs[name])[mask])))
        out[name] = err if absolute else err / scales[name]
    return out


def lagrangian_probe(geom: GeometrySnapshot, dt: float, n_steps: int = 2) -> FlowTrajectory:
    """Forward-Euler RMCF steps with purely normal motion and no remeshing."""
    traj = FlowTrajectory("RMCF")
    traj.snapshots.append(geom)
    x = np.ascontiguousarray(geom.vertices, dtype=float)
    t = float(geom.time)
    hist = [np.empty(1) for _ in range(3)]
    for _ in range(n_steps):
        x, t, k, status, _dt = _kernels.advance(
            x, t, False, geom.mode == "revolution", geom.capped, 1.0, 0.0, 0.0, math.inf, math.inf, 1, dt, math.inf, *hist
        )
        if status < 0:
            raise ValueError("probe step failed")
        traj.snapshots.append(geom.with_vertices(x, time=t))
        traj.step_times.append(t)
        traj.step_dts.append(dt)
    traj.termination = "reached_t_max"
    return traj


def window_rates(traj: FlowTrajectory, k: int) -> dict:
    """Centred time differences of the tracked quantities at stored slice ``k``.

    Raises
    ------
    ProbeContaminated
        A remesh event falls inside the window or the vertex count changes.
    """
    if k < 1 or k + 1 >= len(traj.snapshots):
        raise InsufficientHistory("centred differences need a slice on either side")
    a, b, c = traj.snapshots[k - 1], traj.snapshots[k], traj.snapshots[k + 1]
    if any(a.time < t <= c.time for t in traj.remesh_events):
        raise ProbeContaminated(f"remesh event inside the window ({a.time}, {c.time}]")
    if not (a.n_vertices == b.n_vertices == c.n_vertices):
        raise ProbeContaminated("vertex count changes inside the window")
    la, _ = _quantities(a)
    lc, _ = _quantities(c)
    return {name: (_flat(lc[name]) - _flat(la[name])) / (c.time - a.time) for name in IDENTITIES}


@dataclass
class IdentityCheckReport:
    levels: list
    dts: list
    spatial_errors: dict
    temporal_errors: dict
    spatial_order: dict = field(default_factory=dict)
    temporal_order: dict = field(default_factory=dict)
    weight: str = "f = -|x|^2/4, T = <grad f, n> = -<x, n>/2"

    def rows(self):
        for name in IDENTITIES:
            yield {
                "identity": name,
                "spatial_errors": self.spatial_errors[name],
                "spatial_order": self.spatial_order.get(name),
                "temporal_errors": self.temporal_errors[name],
                "temporal_order": self.temporal_order.get(name),
            }


def _order(sizes, errors):
    s, e = np.asarray(sizes, float), np.asarray(errors, float)
    if len(s) < 3 or np.any(e <= 0.0):
        return None
    return float(np.polyfit(np.log(s), np.log(e), 1)[0])


def verify_evolution_identities(
    source,
    levels=(128, 256, 512),
    dt_factors=(0.2, 0.1, 0.05),
    time: float | None = None,
) -> IdentityCheckReport:
    """Finite-difference check of the evolution equations along RMCF.

    ``source`` is a snapshot or a trajectory (the stored slice closest to
    ``time`` is used, default the middle one).  Its vertices are resampled to
    every count in ``levels``.  Spatial errors compare the semi-discrete time
    derivative with the predicted right side on each level, so they measure
    the spatial discretization alone; temporal errors compare centred
    differences of short Lagrangian forward-Euler probes (``dt = factor *
    h_min^2`` on the finest level) with the semi-discrete derivative at the
    probe centre, so they measure the time discretization alone.

    Raises
    ------
    ProbeContaminated
        A probe window touches a remesh event.
    """
    if isinstance(source, FlowTrajectory):
        times = source.times
        k = len(times) // 2 if time is None else int(np.argmin(np.abs(times - time)))
        geom = source.snapshots[k]
    else:
        geom = source
    spatial = {name: [] for name in IDENTITIES}
    finest = None
    for n in levels:
        g = fourier_resample(geom, n)
        errs = identity_errors(g)
        for name in IDENTITIES:
            spatial[name].append(errs[name])
        finest = g
    h = float(np.min(finest.derived.edge_lengths))
    dts = [f * h * h for f in dt_factors]
    temporal = {name: [] for name in IDENTITIES}
    for dt in dts:
        probe = lagrangian_probe(finest, dt)
        fd = window_rates(probe, 1)
        centre = probe.snapshots[1]
        exact = semidiscrete_rates(centre)
        lhs, rhs = _quantities(centre)
        mask = _interior_mask(finest)
        scales = identity_scales(centre, lhs, rhs, mask)
        for name in IDENTITIES:
            a, b = _flat(fd[name])[mask], _flat(exact[name])[mask]
            temporal[name].append(float(np.max(np.abs(a - b))) / scales[name])
    hs = [1.0 / n for n in levels]
    rep = IdentityCheckReport(list(levels), dts, spatial, temporal)
    for name in IDENTITIES:
        o = _order(hs, spatial[name])
        if o is not None:
            rep.spatial_order[name] = o
        o = _order(dts, temporal[name])
        if o is not None:
            rep.temporal_order[name] = o
    return rep


# ----------------------------------------------------------------------
# singularities


TANGENT_TYPES = ("cylindrical", "round", "cusp", "unresolved")


@dataclass
class SingularityReport:
    singular_time: float | None
    singular_point: tuple | None
    decay_exponent: float | None
    decay_ci: tuple | None
    tangent_type: str
    collapse_side: str
    fit_residual: float | None
    template: str = ""
    secondary_side: str = "n/a"
    max_A: float = float("nan")
    scale_ratio: float = float("nan")
    mode: str = "RMCF"
    message: str = ""

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["singular_point"] = list(self.singular_point) if self.singular_point is not None else None
        out["decay_ci"] = list(self.decay_ci) if self.decay_ci is not None else None
        return out


def fit_circle(points: np.ndarray):
    """Least-squares circle through ``points``: (center, radius, relative RMS residual)."""
    x, y = points[:, 0], points[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    b = x * x + y * y
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = 0.5 * sol[:2]
    R = math.sqrt(sol[2] + c @ c)
    # refine with a few Gauss-Newton steps on the geometric distance
    for _ in range(5):
        d = points - c
        rho = np.hypot(d[:, 0], d[:, 1])
        J = np.column_stack([-d[:, 0] / rho, -d[:, 1] / rho, -np.ones_like(rho)])
        res = rho - R
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c = c + step[:2]
        R = R + step[2]
    rho = np.hypot(*(points - c).T)
    return c, float(R), float(np.sqrt(np.mean((rho - R) ** 2)) / R)


def decay_fit(times, scales, T0=None, n_decades: float = 1.5):
    """Fit ``scale = c (T - t)^alpha`` to the final ``n_decades`` of the scale history.

    Returns (alpha, 95% interval, T, points used).
    """
    t = np.asarray(times, float)
    ell = np.asarray(scales, float)
    keep = ell <= ell[-1] * 10.0**n_decades
    # only the monotone final stretch
    first = len(ell) - 1
    while first > 0 and keep[first - 1] and ell[first - 1] >= ell[first]:
        first -= 1
    t, ell = t[first:], ell[first:]
    if len(t) < 5:
        raise InsufficientHistory("too few records to fit the collapse rate")
    if T0 is None:
        T0 = estimate_singular_time(t, 1.0 / ell) or t[-1]
    T0 = max(T0, t[-1] + 1e-15 * max(1.0, abs(t[-1])))
    scale_t = max(T0 - t[0], 1e-300)

    def model(tt, logc, alpha, T):
        return logc + alpha * np.log(np.maximum(T - tt, 1e-300 * scale_t) / scale_t)

    p0 = [math.log(ell[0]), 0.5, T0]
    lo = [-np.inf, 0.0, t[-1] + 1e-16]
    hi = [np.inf, 2.0, t[-1] + scale_t]
    popt, pcov = curve_fit(model, t, np.log(ell), p0=p0, bounds=(lo, hi), maxfev=20000)
    alpha = float(popt[1])
    se = float(np.sqrt(max(pcov[1, 1], 0.0)))
    return alpha, (alpha - 1.96 * se, alpha + 1.96 * se), float(popt[2]), len(t)


def _side_from_sign(value):
    return "inside" if value > 0.0 else "outside"


def detect_and_classify(
    traj: FlowTrajectory,
    fit_threshold: float = 0.02,
    loop_factor: float = 5.0,
    cusp_factor: float = 10.0,
) -> SingularityReport:
    """Locate the singularity of a blown-up run and classify its tangent flow.

    Templates, tried in order on the last stored slice with ``l = 1/max|A|``:

    loop
        the whole closed curve has diameter at most ``loop_factor * l`` and a
        least-squares circle fits it with relative RMS residual at most
        ``fit_threshold``.  A torus-type profile loop away from the axis is a
        shrinking cylinder; a planar curve or a capped profile is round.
    neck
        (revolution) the curvature peak sits at ``r <= 2 l`` with the
        rotational curvature dominant, and over the window
        ``|z - z*| <= r*/sqrt(2)`` (unit length once the neck is rescaled to
        radius sqrt(2)) the profile radius is constant within ``fit_threshold``
        (relative RMS): a cylinder around the axis.
    cusp
        the curvature peak is at least ``cusp_factor`` times smaller than the
        curve: the curvature blows up at a fixed scale.

    The collapse side comes from the sign of Htilde (RMCF) or H (MCF) over
    the singular region; the direction of the normals relative to the
    fitted cylinder's outer normal is reported as a secondary signal.
    """
    if traj.termination != "blow_up" or not traj.snapshots:
        return SingularityReport(None, None, None, None, "unresolved", "n/a", None, mode=traj.mode, message="no blow-up")
    last = traj.snapshots[-1]
    A = np.sqrt(last.A2)
    i_star = int(np.argmax(A))
    ell = 1.0 / float(A[i_star])
    x_star = last.vertices[i_star]
    curv_sign = last.Htilde if traj.mode == "RMCF" else last.H
    rec_t = [r["time"] for r in traj.records]
    rec_a = [r["max_A"] for r in traj.records]
    T = estimate_singular_time(rec_t, rec_a)
    try:
        alpha, ci, _, _ = decay_fit(rec_t, 1.0 / np.asarray(rec_a), T0=T)
    except (InsufficientHistory, RuntimeError, ValueError):
        alpha, ci = None, None
    diam = last.diameter if last.mode == "curve" else float(np.hypot(*np.ptp(last.closed_curve(), axis=0)))
    scale_ratio = diam / ell
    rep = SingularityReport(T, tuple(x_star), alpha, ci, "unresolved", "n/a", None, max_A=1.0 / ell, scale_ratio=scale_ratio, mode=traj.mode)

    # loop template
    if scale_ratio <= loop_factor:
        c, R, res = fit_circle(last.closed_curve())
        rep.fit_residual = res
        rep.template = "loop"
        if res <= fit_threshold:
            off_axis = last.mode == "revolution" and not last.capped and c[0] - R > 0.0
            rep.tangent_type = "cylindrical" if off_axis else "round"
            rep.singular_point = tuple(c)
            rep.collapse_side = _side_from_sign(float(np.mean(curv_sign)))
            radial = last.vertices - c
            radial /= np.hypot(radial[:, 0], radial[:, 1])[:, None]
            rep.secondary_side = _side_from_sign(float(np.mean(np.einsum("ij,ij->i", radial, last.normal))))
        return rep

    # neck template
    if last.mode == "revolution":
        rot = np.abs(last.derived.rot_curvature[i_star])
        r_star = float(x_star[0])
        if r_star <= 2.0 * ell and rot >= abs(last.kappa[i_star]):
            v = last.vertices
            window = (np.abs(v[:, 1] - x_star[1]) <= r_star / math.sqrt(2.0)) & (v[:, 0] <= 4.0 * r_star)
            rr = v[window, 0]
            rep.template = "neck"
            if rr.size >= 3:
                rbar = float(np.mean(rr))
                res = float(np.sqrt(np.mean((rr - rbar) ** 2)) / rbar)
                rep.fit_residual = res
                if res <= fit_threshold:
                    rep.tangent_type = "cylindrical"
                    rep.singular_point = (0.0, float(x_star[1]))
                    rep.collapse_side = _side_from_sign(float(np.mean(curv_sign[window])))
                    rep.secondary_side = _side_from_sign(float(np.mean(last.normal[window, 0])))
            else:
                rep.message = "neck window under-resolved"
            return rep

    if scale_ratio >= cusp_factor:
        rep.template = "cusp"
        rep.tangent_type = "cusp"
        return rep
    rep.message = "no template matched"
    return rep
