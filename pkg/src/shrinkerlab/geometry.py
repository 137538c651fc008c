"""Discrete closed curves and surface-of-revolution profiles.

A :class:`GeometrySnapshot` is an immutable array of vertices together with
lazily computed differential quantities.  Two modes are supported:

``curve``
    a closed planar curve in the (x1, x2) plane, embedded or immersed.
``revolution``
    a profile curve in the (r, z) half-plane describing a hypersurface of
    revolution about the z axis.  Either a closed loop in r > 0 (torus type)
    or a *capped* half-profile whose first and last vertices lie on the axis
    (sphere type).  Capped profiles are handled by reflecting them across the
    axis, which supplies the symmetry ghost points for every stencil.

Tangent and curvature come from circles through each vertex and its
neighbours (centered stencils of width 3 and 5, Richardson-combined).  They are
exact on circles and fourth order on any smoothly graded sampling, so
curvature-adapted meshes are allowed; uniform arclength is the default
produced by :func:`resample`.

Sign conventions: vertices are stored counterclockwise (positive total
turning), the normal is the clockwise rotation of the unit tangent and points
to the unbounded side, and the curvature of a counterclockwise circle is
positive.  With these choices the round shrinkers have ``H = <x, n>/2 > 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import AxisCollision, DegenerateGeometry, UnsupportedForImmersed

MODES = ("curve", "revolution")

# Gauss-Legendre nodes on [0, 1] used for spline arclength integrals.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True)
class Derived:
    """Pointwise differential quantities of a snapshot (one entry per vertex)."""

    tangent: np.ndarray
    normal: np.ndarray
    kappa: np.ndarray
    rot_curvature: np.ndarray  # n_r / r for revolution profiles, zeros for curves
    H: np.ndarray
    Htilde: np.ndarray
    support: np.ndarray  # <x, n>
    A2: np.ndarray  # squared norm of the second fundamental form
    speed: np.ndarray  # |dx/du| with u the vertex index
    edge_lengths: np.ndarray
    ds: np.ndarray  # quadrature weights for the arclength measure


@dataclass(frozen=True, eq=False)
class GeometrySnapshot:
    """An immutable discretized closed curve or revolution profile.

    Parameters
    ----------
    vertices : array_like, shape (N, 2)
        Ordered vertices; the curve is closed implicitly (no repeated end
        point).  For revolution profiles the columns are (r, z).
    mode : {"curve", "revolution"}
    immersed : bool
        Allow self-intersections (Abresch-Langer curves).
    time : float
        Flow time attached to the snapshot.
    """

    vertices: np.ndarray
    mode: str = "curve"
    immersed: bool = False
    time: float = 0.0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must have shape (N, 2)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(v) < 3:
            raise DegenerateGeometry("need at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise DegenerateGeometry("non-finite vertex coordinates")
        if self.mode == "revolution":
            capped = v[0, 0] == 0.0 and v[-1, 0] == 0.0
            interior = v[1:-1, 0] if capped else v[:, 0]
            if np.any(interior <= 0.0):
                raise AxisCollision("revolution profile touches or crosses the axis r = 0")
            if capped and v[0, 1] > v[-1, 1]:
                v = v[::-1].copy()
        if not self._is_capped(v):
            if _total_turning(v) < 0.0:
                v = v[::-1].copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "time", float(self.time))

    def _is_capped(self, v):
        return self.mode == "revolution" and v[0, 0] == 0.0 and v[-1, 0] == 0.0

    @property
    def ambient_dim(self) -> int:
        return 2 if self.mode == "curve" else 3

    @property
    def capped(self) -> bool:
        return self._is_capped(self.vertices)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices, time=None) -> "GeometrySnapshot":
        return GeometrySnapshot(
            vertices,
            mode=self.mode,
            immersed=self.immersed,
            time=self.time if time is None else time,
        )

    def with_time(self, time) -> "GeometrySnapshot":
        return replace(self, time=time)

    # ------------------------------------------------------------------
    def closed_curve(self) -> np.ndarray:
        """Vertices of the closed planar curve; capped profiles are mirrored."""
        v = self.vertices
        if not self.capped:
            return v
        mirror = v[-2:0:-1] * np.array([-1.0, 1.0])
        return np.vstack([v, mirror])

    @cached_property
    def derived(self) -> Derived:
        return _differential_quantities(self)

    # convenience accessors
    @property
    def normal(self):
        return self.derived.normal

    @property
    def kappa(self):
        return self.derived.kappa

    @property
    def H(self):
        return self.derived.H

    @property
    def Htilde(self):
        return self.derived.Htilde

    @property
    def A2(self):
        return self.derived.A2

    @cached_property
    def length(self) -> float:
        """Arclength of the interpolating periodic cubic spline."""
        spline, knots = _periodic_spline(self.closed_curve())
        total = float(_segment_lengths(spline, knots).sum())
        return 0.5 * total if self.capped else total

    @property
    def diameter(self) -> float:
        pts = self.closed_curve()
        if self.mode == "revolution":
            pts = np.vstack([pts, pts * np.array([-1.0, 1.0])])
        span = pts.max(axis=0) - pts.min(axis=0)
        return float(np.hypot(*span))

    def to_dict(self) -> dict:
        return {
            "ambient_dim": self.ambient_dim,
            "mode": self.mode,
            "immersed": bool(self.immersed),
            "time": self.time,
            "vertices": self.vertices.tolist(),
        }

    def to_json(self) -> str:
        """Serialize with 17 significant digits per coordinate."""
        verts = ",".join(f"[{a:.17g},{b:.17g}]" for a, b in self.vertices)
        return (
            f'{{"ambient_dim":{self.ambient_dim},"mode":"{self.mode}",'
            f'"immersed":{"true" if self.immersed else "false"},'
            f'"time":{self.time:.17g},"vertices":[{verts}]}}'
        )

    @classmethod
    def from_dict(cls, data: dict) -> "GeometrySnapshot":
        mode = data.get("mode", "curve" if data.get("ambient_dim", 2) == 2 else "revolution")
        return cls(
            np.asarray(data["vertices"], dtype=float),
            mode=mode,
            immersed=bool(data.get("immersed", False)),
            time=float(data.get("time", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "GeometrySnapshot":
        return cls.from_dict(json.loads(text))


# ----------------------------------------------------------------------
# constructors


def circle(radius, n_vertices=256, center=(0.0, 0.0), mode="curve", phase=0.0, time=0.0):
    """Uniformly sampled counterclockwise circle."""
    t = phase + 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    pts = np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)])
    return GeometrySnapshot(pts, mode=mode, time=time)


def sphere_profile(radius, n_vertices=257, time=0.0):
    """Capped half-profile of the sphere of the given radius centred at the origin."""
    t = np.linspace(-0.5 * np.pi, 0.5 * np.pi, n_vertices)
    pts = np.column_stack([radius * np.cos(t), radius * np.sin(t)])
    pts[0, 0] = pts[-1, 0] = 0.0
    return GeometrySnapshot(pts, mode="revolution", time=time)


# ----------------------------------------------------------------------
# discrete calculus


def _total_turning(v: np.ndarray) -> float:
    e = np.roll(v, -1, axis=0) - v
    ang = np.arctan2(e[:, 1], e[:, 0])
    d = np.diff(np.concatenate([ang, ang[:1]]))
    d = (d + np.pi) % (2.0 * np.pi) - np.pi
    return float(d.sum())


def turning_number(geom: GeometrySnapshot) -> int:
    return int(round(_total_turning(geom.closed_curve()) / (2.0 * np.pi)))


def signed_area(geom: GeometrySnapshot) -> float:
    """Area enclosed by the periodic cubic spline, counted with winding multiplicity.

    The integrand of ``(x dy - y dx) / 2`` is a quintic on each spline piece,
    so the Gauss rule integrates it exactly.
    """
    spline, knots = _periodic_spline(geom.closed_curve())
    h = np.diff(knots)
    u = knots[:-1, None] + h[:, None] * _GL_X[None, :]
    x = spline(u)
    d = spline(u, 1)
    integrand = x[..., 0] * d[..., 1] - x[..., 1] * d[..., 0]
    return 0.5 * float(np.sum(h * (integrand @ _GL_W)))


def isoperimetric_ratio(geom: GeometrySnapshot) -> float:
    """L^2 / (4 pi p A) with p the turning number; equals 1 on a p-fold circle."""
    p = max(turning_number(geom), 1)
    return geom.length**2 / (4.0 * np.pi * p * signed_area(geom))


def _circle_frame(p: np.ndarray, stride: int):
    """Tangent and signed curvature of the circle through x[i-stride], x[i], x[i+stride]."""
    nxt = np.roll(p, -stride, axis=0)
    prv = np.roll(p, stride, axis=0)
    fwd = nxt - p
    bwd = p - prv
    hp = np.hypot(fwd[:, 0], fwd[:, 1])
    hm = np.hypot(bwd[:, 0], bwd[:, 1])
    if np.any(hp < 1e-300) or np.any(hm < 1e-300):
        raise DegenerateGeometry("coincident vertices")
    ep = fwd / hp[:, None]
    em = bwd / hm[:, None]
    t = hm[:, None] * ep + hp[:, None] * em
    tangent = t / np.hypot(t[:, 0], t[:, 1])[:, None]
    chord = np.hypot(*(nxt - prv).T)
    kappa = 2.0 * (em[:, 0] * ep[:, 1] - em[:, 1] * ep[:, 0]) / chord
    return tangent, kappa


def _frame(p: np.ndarray):
    """Unit tangent and curvature at every vertex of a closed polygon.

    The circumscribed-circle estimates at strides 1 and 2 are both exact on
    circles and carry an even O(h^2) error on smooth curves, so the
    Richardson combination is exact on circles and fourth order otherwise.
    """
    t1, k1 = _circle_frame(p, 1)
    t2, k2 = _circle_frame(p, 2)
    t = (4.0 * t1 - t2) / 3.0
    return t / np.hypot(t[:, 0], t[:, 1])[:, None], (4.0 * k1 - k2) / 3.0


def _differential_quantities(geom: GeometrySnapshot) -> Derived:
    p = geom.closed_curve()
    n_own = geom.n_vertices
    tangent, kappa = _frame(p)
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    speed = 0.5 * np.linalg.norm(np.roll(p, -1, axis=0) - np.roll(p, 1, axis=0), axis=1)

    # fourth-order speed for quadrature weights
    x2p = np.roll(p, -2, axis=0)
    x2m = np.roll(p, 2, axis=0)
    xu4 = (8.0 * (np.roll(p, -1, axis=0) - np.roll(p, 1, axis=0)) - (x2p - x2m)) / 12.0
    speed4 = np.hypot(xu4[:, 0], xu4[:, 1])

    tangent, normal, kappa, speed4 = tangent[:n_own], normal[:n_own], kappa[:n_own], speed4[:n_own]
    speed = speed[:n_own]
    v = geom.vertices
    support = np.einsum("ij,ij->i", v, normal)

    if geom.mode == "revolution":
        r = v[:, 0]
        rot = np.empty(n_own)
        if geom.capped:
            rot[1:-1] = normal[1:-1, 0] / r[1:-1]
            rot[0] = kappa[0]
            rot[-1] = kappa[-1]
        else:
            rot = normal[:, 0] / r
        H = kappa + rot
        A2 = kappa**2 + rot**2
        ds = speed4 * 2.0 * np.pi * r
        if geom.capped:
            # |r| has a kink at the poles of the mirrored curve; the
            # Euler-Maclaurin end correction restores fourth order there
            ds[0] = 2.0 * np.pi * speed4[0] ** 2 / 12.0
            ds[-1] = 2.0 * np.pi * speed4[-1] ** 2 / 12.0
    else:
        rot = np.zeros(n_own)
        H = kappa
        A2 = kappa**2
        ds = speed4

    if geom.capped:
        edges = np.linalg.norm(np.diff(v, axis=0), axis=1)
    else:
        edges = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)

    return Derived(
        tangent=tangent,
        normal=normal,
        kappa=kappa,
        rot_curvature=rot,
        H=H,
        Htilde=H - 0.5 * support,
        support=support,
        A2=A2,
        speed=speed,
        edge_lengths=edges,
        ds=ds,
    )


def differential_quantities(geom: GeometrySnapshot) -> GeometrySnapshot:
    """Return ``geom`` with its derived fields evaluated.

    Raises
    ------
    DegenerateGeometry
        Fewer than 16 vertices or coincident neighbours.
    """
    if geom.n_vertices < 16:
        raise DegenerateGeometry("differential quantities need at least 16 vertices")
    geom.derived  # noqa: B018 - populates the cache
    return geom


def gaussian_area(geom: GeometrySnapshot) -> float:
    """Gaussian-weighted area: the integral of exp(-|x|^2/4) over the hypersurface."""
    v = geom.vertices
    w = np.exp(-0.25 * np.einsum("ij,ij->i", v, v))
    return float(np.sum(w * geom.derived.ds))


def weighted_measure(geom: GeometrySnapshot) -> np.ndarray:
    """Per-vertex quadrature weights of the Gaussian measure."""
    v = geom.vertices
    return np.exp(-0.25 * np.einsum("ij,ij->i", v, v)) * geom.derived.ds


# ----------------------------------------------------------------------
# resampling


def _periodic_spline(p: np.ndarray):
    closed = np.vstack([p, p[:1]])
    chord = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    if chord.sum() < 1e-10:
        raise DegenerateGeometry("total arclength below 1e-10")
    if np.any(chord == 0.0):
        raise DegenerateGeometry("repeated vertex")
    knots = np.concatenate([[0.0], np.cumsum(chord)])
    return CubicSpline(knots, closed, bc_type="periodic", axis=0), knots


def _segment_lengths(spline, knots):
    a = knots[:-1]
    h = np.diff(knots)
    u = a[:, None] + h[:, None] * _GL_X[None, :]
    d = spline(u, 1)
    return h * (np.hypot(d[..., 0], d[..., 1]) @ _GL_W)


def _partial_length(spline, a, u):
    h = u - a
    pts = a[:, None] + h[:, None] * _GL_X[None, :]
    d = spline(pts, 1)
    return h * (np.hypot(d[..., 0], d[..., 1]) @ _GL_W)


def _arclength_to_param(spline, knots, cum, targets):
    seg = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(knots) - 2)
    a = knots[seg]
    frac = (targets - cum[seg]) / (cum[seg + 1] - cum[seg])
    u = a + frac * (knots[seg + 1] - a)
    for _ in range(6):
        err = cum[seg] + _partial_length(spline, a, u) - targets
        d = spline(u, 1)
        u = u - err / np.hypot(d[:, 0], d[:, 1])
    return u


def _smooth_periodic(w: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        w = 0.25 * np.roll(w, 1) + 0.5 * w + 0.25 * np.roll(w, -1)
    return w


def resample(geom: GeometrySnapshot, n_vertices: int, weight=None) -> GeometrySnapshot:
    """Redistribute vertices along the periodic cubic spline through ``geom``.

    With ``weight=None`` the new vertices are equispaced in arclength.  A
    positive per-vertex ``weight`` (for example ``sqrt(1 + c^2 |A|^2)``)
    equidistributes the weighted arclength instead, concentrating vertices
    where the weight is large.

    Raises
    ------
    DegenerateGeometry
        Total arclength below 1e-10.
    """
    if n_vertices < 16:
        raise ValueError("n_vertices must be at least 16")
    p = geom.closed_curve()
    spline, knots = _periodic_spline(p)
    seg = _segment_lengths(spline, knots)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    m = 2 * n_vertices - 2 if geom.capped else n_vertices

    if weight is None:
        targets = total * np.arange(m) / m
    else:
        w = np.asarray(weight, dtype=float)
        if geom.capped:
            w = np.concatenate([w, w[-2:0:-1]])
        if w.shape != (len(p),) or np.any(w <= 0.0):
            raise ValueError("weight must be positive with one entry per vertex")
        # weighted arclength: trapezoid of the (vertex-sampled) weight over spline segments
        wcum = np.concatenate([[0.0], np.cumsum(0.5 * (w + np.roll(w, -1)) * seg)])
        wt = wcum[-1] * np.arange(m) / m
        targets = np.interp(wt, wcum, cum)

    u = _arclength_to_param(spline, knots, cum, targets)
    new = spline(u)
    if geom.capped:
        new = new[:n_vertices].copy()
        new[0, 0] = 0.0
        new[-1, 0] = 0.0
    return GeometrySnapshot(new, mode=geom.mode, immersed=geom.immersed, time=geom.time)


def fourier_resample(geom: GeometrySnapshot, n_vertices: int) -> GeometrySnapshot:
    """Trigonometric interpolation of the closed curve in its vertex index.

    Unlike the cubic spline this interpolant is smooth to all orders, which
    matters when high derivatives of the refined curve are compared across
    resolutions.  The spacing of the input is carried over smoothly, so a
    uniform input gives a uniform output.
    """
    if n_vertices < 16:
        raise ValueError("n_vertices must be at least 16")
    if n_vertices == geom.n_vertices:
        return geom
    p = geom.closed_curve()
    m = len(p)
    m_new = 2 * n_vertices - 2 if geom.capped else n_vertices
    z = np.fft.fft(p[:, 0] + 1j * p[:, 1])
    k = np.fft.fftfreq(m, d=1.0 / m)
    out = np.zeros(m_new, dtype=complex)
    kn = np.fft.fftfreq(m_new, d=1.0 / m_new)
    lim = min(m, m_new) / 2.0
    for src, freq in enumerate(k):
        if abs(freq) < lim:
            out[np.flatnonzero(kn == freq)[0]] += z[src]
        elif abs(freq) == lim:
            # split the Nyquist mode evenly between +-lim when refining
            targets = np.flatnonzero(np.abs(kn) == lim) if m_new > m else np.flatnonzero(kn == -lim)
            out[targets] += z[src] / len(targets) if m_new > m else z[src]
    w = np.fft.ifft(out) * (m_new / m)
    new = np.column_stack([w.real, w.imag])
    if geom.capped:
        new = new[:n_vertices].copy()
        new[0, 0] = 0.0
        new[-1, 0] = 0.0
    return GeometrySnapshot(new, mode=geom.mode, immersed=geom.immersed, time=geom.time)


# ----------------------------------------------------------------------
# inside / outside


def _segments(geom):
    p = geom.closed_curve()
    return p, np.roll(p, -1, axis=0)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the polyline with segments (a[k], b[k])."""
    points = np.atleast_2d(points)
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    L2 = np.where(L2 == 0.0, 1.0, L2)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("mkj,kj->mk", ap, ab) / L2, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(points[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def winding_numbers(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Winding number of the closed polygon ``poly`` around each point."""
    points = np.atleast_2d(points)
    a = poly
    b = np.roll(poly, -1, axis=0)
    ax = a[None, :, 0] - points[:, None, 0]
    ay = a[None, :, 1] - points[:, None, 1]
    bx = b[None, :, 0] - points[:, None, 0]
    by = b[None, :, 1] - points[:, None, 1]
    cross = ax * by - ay * bx
    up = (ay <= 0.0) & (by > 0.0) & (cross > 0.0)
    down = (ay > 0.0) & (by <= 0.0) & (cross < 0.0)
    return up.sum(axis=1) - down.sum(axis=1)


def _profile_points(geom, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if geom.mode == "revolution" and pts.shape[1] == 3:
        pts = np.column_stack([np.hypot(pts[:, 0], pts[:, 1]), pts[:, 2]])
    if geom.mode == "revolution":
        pts = np.column_stack([np.abs(pts[:, 0]), pts[:, 1]])
    return pts


def side_of_many(geom: GeometrySnapshot, points, boundary_tol=1e-9) -> np.ndarray:
    """Vectorized :func:`side_of`; returns an array of labels."""
    if geom.immersed:
        raise UnsupportedForImmersed("inside/outside is undefined for immersed curves")
    pts = _profile_points(geom, points)
    poly = geom.closed_curve()
    wn = winding_numbers(pts, poly)
    a, b = _segments(geom)
    dist = point_segment_distance(pts, a, b)
    out = np.where(wn != 0, "inside", "outside").astype(object)
    out[dist < boundary_tol * geom.diameter] = "on-boundary"
    return out


def side_of(geom: GeometrySnapshot, point) -> str:
    """Classify a point as ``"inside"``, ``"outside"`` or ``"on-boundary"``.

    For revolution profiles the point may be given in the (r, z) half-plane
    or as a point of R^3.

    Raises
    ------
    UnsupportedForImmersed
    """
    return str(side_of_many(geom, [point])[0])


def is_embedded(geom: GeometrySnapshot) -> bool:
    """True when no two non-adjacent edges of the closed polygon intersect."""
    p = geom.closed_curve()
    q = np.roll(p, -1, axis=0)
    n = len(p)
    # sweep by x-extent to keep memory bounded
    lo = np.minimum(p[:, 0], q[:, 0])
    hi = np.maximum(p[:, 0], q[:, 0])
    order = np.argsort(lo)
    for idx, i in enumerate(order):
        cand = order[idx + 1 :]
        cand = cand[lo[cand] <= hi[i]]
        if cand.size == 0:
            continue
        cand = cand[(np.abs(cand - i) > 1) & (np.abs(cand - i) < n - 1)]
        if cand.size == 0:
            continue
        if np.any(_segments_cross(p[i], q[i], p[cand], q[cand])):
            return False
    return True


def _segments_cross(a, b, c, d):
    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
            r[..., 0] - p[..., 0]
        )

    o1 = orient(a, b, c)
    o2 = orient(a, b, d)
    o3 = orient(c, d, a)
    o4 = orient(c, d, b)
    return (o1 * o2 < 0.0) & (o3 * o4 < 0.0)
