"""Explicit time stepping of mean curvature flow and rescaled mean curvature flow.

Normal velocities:

* MCF:   ``dx/dt = -H n``
* RMCF:  ``dx/dt = -(H - <x, n>/2) n``

Each step is a forward-Euler normal update combined with a tangential
redistribution that slides vertices along their osculating circles toward
equal (optionally curvature-weighted) spacing.  A full spline remesh runs on a
fixed cadence and whenever an edge gets too short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AxisCollision,
    DegenerateGeometry,
    InsufficientHistory,
    NumericalBlowup,
)
from . import _kernels
from .geometry import GeometrySnapshot, gaussian_area, resample

FLOW_MODES = ("RMCF", "MCF")

# Largest stable dt / h^2 for the Richardson curvature stencil under forward Euler.
_STABILITY = 0.375


@dataclass
class FlowConfig:
    """Run parameters.

    ``monitor`` is a length scale c: vertices equidistribute
    ``sqrt(1 + c^2 |A|^2) ds``; ``0`` means uniform arclength.  ``dt_max``
    caps the adaptive step where curvature is small, which matters for
    expanding RMCF runs whose dilation term is not controlled by ``|A|``.
    """

    mode: str
    initial: GeometrySnapshot
    t_max: float
    cfl: float = 0.4
    remesh_every: int = 50
    a_max: float = 1e3
    output_dt: float | None = None
    output_growth: float = 1.05
    monitor: float = 0.0
    redistribute: bool = True
    max_steps: int = 5_000_000
    t_start: float | None = None
    dt_max: float = 0.01

    def __post_init__(self):
        if self.mode not in FLOW_MODES:
            raise ValueError(f"mode must be one of {FLOW_MODES}")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.a_max <= math.sqrt(float(np.max(self.initial.A2))):
            raise ValueError("a_max must exceed the initial max |A|")


@dataclass
class FlowTrajectory:
    mode: str
    snapshots: list = field(default_factory=list)
    records: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    step_dts: list = field(default_factory=list)
    step_max_a: list = field(default_factory=list)
    remesh_events: list = field(default_factory=list)
    termination: str = "error"
    singular_time: float | None = None
    message: str = ""

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots])

    def __len__(self):
        return len(self.snapshots)

    def at(self, time: float) -> np.ndarray:
        """Vertex positions at ``time`` by cubic Lagrange interpolation in time.

        Needs four stored snapshots with a common vertex count around ``time``.
        """
        t = self.times
        if len(t) < 4 or time < t[0] or time > t[-1]:
            raise InsufficientHistory(f"time {time} outside the stored window [{t[0]}, {t[-1]}]")
        k = int(np.clip(np.searchsorted(t, time) - 2, 0, len(t) - 4))
        idx = range(k, k + 4)
        pts = [self.snapshots[i].vertices for i in idx]
        if len({p.shape for p in pts}) != 1:
            raise InsufficientHistory("vertex count changes inside the interpolation stencil")
        tt = t[k : k + 4]
        out = np.zeros_like(pts[0])
        for a in range(4):
            la = 1.0
            for b in range(4):
                if b != a:
                    la *= (time - tt[b]) / (tt[a] - tt[b])
            out += la * pts[a]
        return out


@dataclass(frozen=True)
class RescalingSpec:
    sigma: float
    y: tuple = (0.0, 0.0)
    T: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


# ----------------------------------------------------------------------
# single step


def normal_velocity(geom: GeometrySnapshot, mode: str) -> np.ndarray:
    """Speed V in ``dx/dt = -V n``."""
    return geom.Htilde if mode == "RMCF" else geom.H


def monitor_weight(geom: GeometrySnapshot, c: float) -> np.ndarray | None:
    if c <= 0.0:
        return None
    w = np.sqrt(1.0 + c * c * geom.A2)
    # two smoothing passes keep the induced mesh gradation mild
    for _ in range(2):
        w = 0.25 * np.roll(w, 1) + 0.5 * w + 0.25 * np.roll(w, -1)
    if geom.capped:
        w[0], w[-1] = w[1], w[-2]
    return w


def redistribute(geom: GeometrySnapshot, weight=None, omega: float = 0.5) -> GeometrySnapshot:
    """Slide vertices tangentially toward equal (weighted) edge lengths.

    Each vertex moves by ``delta`` along its osculating circle, which keeps it
    on the curve to third order in ``delta``.
    """
    v = geom.vertices
    d = geom.derived
    nxt = np.roll(v, -1, axis=0)
    prv = np.roll(v, 1, axis=0)
    hp = np.linalg.norm(nxt - v, axis=1)
    hm = np.linalg.norm(v - prv, axis=1)
    if weight is None:
        delta = 0.5 * omega * (hp - hm)
    else:
        w = np.asarray(weight)
        wp = 0.5 * (w + np.roll(w, -1))
        wm = 0.5 * (w + np.roll(w, 1))
        delta = omega * (wp * hp - wm * hm) / (wp + wm)
    if geom.capped:
        delta[0] = delta[-1] = 0.0
    moved = v + delta[:, None] * d.tangent - (0.5 * d.kappa * delta**2)[:, None] * d.normal
    if geom.capped:
        moved[0, 0] = moved[-1, 0] = 0.0
    return GeometrySnapshot(moved, mode=geom.mode, immersed=geom.immersed, time=geom.time)


def stable_dt(geom: GeometrySnapshot, cfl: float = 0.4) -> float:
    """Adaptive explicit step: ``cfl * min(0.75 h_min^2, 1/max|A|^2)`` (halved for profiles)."""
    h = float(np.min(geom.derived.edge_lengths))
    lim = 2.0 * _STABILITY * h * h
    if geom.mode == "revolution":
        lim *= 0.5
    return cfl * min(lim, 1.0 / float(np.max(geom.A2)))


def step(
    geom: GeometrySnapshot,
    dt: float,
    mode: str = "RMCF",
    redistribute_mesh: bool = True,
    weight=None,
) -> GeometrySnapshot:
    """One forward-Euler step ``x <- x - dt V n`` plus tangential redistribution.

    Raises
    ------
    NumericalBlowup
        Non-finite coordinates, or a revolution profile pushed through the axis.
    """
    V = normal_velocity(geom, mode)
    x = geom.vertices - dt * V[:, None] * geom.normal
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup(f"non-finite coordinates at t={geom.time}")
    if geom.capped:
        x[0, 0] = x[-1, 0] = 0.0
    try:
        new = GeometrySnapshot(x, mode=geom.mode, immersed=geom.immersed, time=geom.time + dt)
        if redistribute_mesh:
            new = redistribute(new, weight)
    except (AxisCollision, DegenerateGeometry) as exc:
        raise NumericalBlowup(f"{exc} at t={geom.time}") from exc
    return new


# ----------------------------------------------------------------------
# runs


def _record(geom, dt, mode):
    a = math.sqrt(float(np.max(geom.A2)))
    return {
        "time": geom.time,
        "dt": dt,
        "max_A": a,
        "min_Htilde": float(np.min(geom.Htilde)),
        "max_Htilde": float(np.max(geom.Htilde)),
        "gaussian_area": gaussian_area(geom),
    }


def estimate_singular_time(times, max_a, n_last: int = 20) -> float | None:
    """Extrapolate ``1/max|A|^2`` to zero with a quadratic fit over the last records."""
    t = np.asarray(times[-n_last:], dtype=float)
    y = 1.0 / np.asarray(max_a[-n_last:], dtype=float) ** 2
    if len(t) < 4:
        return None
    t0 = t[-1]
    c = np.polyfit(t - t0, y, 2)
    roots = np.roots(c)
    roots = roots[np.isreal(roots)].real
    roots = roots[roots >= -1e-12]
    if roots.size == 0:
        # fall back to the linear trend
        c1 = np.polyfit(t - t0, y, 1)
        if c1[0] >= 0:
            return None
        return float(t0 - c1[1] / c1[0])
    return float(t0 + roots.min())


def run(config: FlowConfig) -> FlowTrajectory:
    """Evolve until ``t_max`` or until ``max|A| >= a_max``.

    Snapshots are stored every ``output_dt`` in time and whenever ``max|A|``
    has grown by the factor ``output_growth`` since the last stored one, so
    the approach to a singularity is densely sampled.  The explicit steps
    between two such events run inside a compiled kernel; the normal update
    and the tangential redistribution of a step share one frame evaluation.
    """
    mode = config.mode
    t0 = config.t_start
    if t0 is None:
        t0 = -1.0 if mode == "MCF" else 0.0
    geom = config.initial.with_vertices(config.initial.vertices, time=t0)
    t_end = t0 + config.t_max
    out_dt = config.output_dt or config.t_max / 200.0
    traj = FlowTrajectory(mode)
    n_vertices = geom.n_vertices
    revolution = geom.mode == "revolution"
    omega = 0.5 if config.redistribute else 0.0
    chunk = max(1, int(config.remesh_every))
    hist = [np.empty(chunk) for _ in range(3)]

    traj.snapshots.append(geom)
    traj.records.append(_record(geom, 0.0, mode))
    # output times lie on the fixed grid t0 + k out_dt so that runs with a
    # common grid can be compared slice by slice
    k_out = 1
    last_out_a = traj.records[-1]["max_A"]
    diam0 = geom.diameter
    since_remesh = 0
    total = 0
    dt = 0.0

    while True:
        if total >= config.max_steps:
            traj.termination = "error"
            traj.message = "max_steps exhausted"
            break
        t_stop = min(t0 + k_out * out_dt, t_end)
        a_stop = min(config.output_growth * last_out_a, config.a_max)
        budget = min(chunk - since_remesh, config.max_steps - total)
        x, t, k, status, dt = _kernels.advance(
            np.ascontiguousarray(geom.vertices, dtype=float),
            float(geom.time),
            mode == "MCF",
            revolution,
            geom.capped,
            float(config.cfl),
            omega,
            float(config.monitor),
            float(t_stop),
            float(a_stop),
            int(budget),
            0.0,
            float(config.dt_max),
            *hist,
        )
        traj.step_times.extend(hist[0][:k].tolist())
        traj.step_dts.extend(hist[1][:k].tolist())
        traj.step_max_a.extend(hist[2][:k].tolist())
        total += k
        since_remesh += k
        if status == _kernels.NON_FINITE:
            traj.termination = "error"
            traj.message = f"non-finite coordinates at t={t}"
            break
        if status == _kernels.AXIS:
            traj.termination = "error"
            traj.message = f"profile pushed through the axis at t={t}"
            break
        try:
            new = GeometrySnapshot(x, mode=geom.mode, immersed=geom.immersed, time=t)
            if config.redistribute:
                hmin = float(np.min(new.derived.edge_lengths))
                if hmin < 1e-12 * diam0:
                    raise DegenerateGeometry("edge collapsed below 1e-12 of the diameter")
                if since_remesh >= chunk or hmin < 1e-8 * new.diameter:
                    new = resample(new, n_vertices, monitor_weight(new, config.monitor))
                    traj.remesh_events.append(new.time)
                    since_remesh = 0
            else:
                since_remesh = 0
            a = math.sqrt(float(np.max(new.A2)))
            if not np.isfinite(a):
                raise NumericalBlowup("non-finite curvature")
        except (NumericalBlowup, DegenerateGeometry, AxisCollision) as exc:
            traj.termination = "error"
            traj.message = str(exc)
            break
        geom = new
        final = geom.time >= t_end
        blown = a >= config.a_max
        on_grid = geom.time >= t0 + k_out * out_dt - 1e-12 * max(1.0, abs(geom.time))
        if final or blown or on_grid or a >= config.output_growth * last_out_a:
            traj.snapshots.append(geom)
            traj.records.append(_record(geom, dt, mode))
            last_out_a = a
        while geom.time >= t0 + k_out * out_dt - 1e-12 * max(1.0, abs(geom.time)):
            k_out += 1
        if blown:
            traj.termination = "blow_up"
            rec_t = [r["time"] for r in traj.records]
            rec_a = [r["max_A"] for r in traj.records]
            traj.singular_time = estimate_singular_time(rec_t, rec_a)
            break
        if final:
            traj.termination = "reached_t_max"
            break
    return traj


# ----------------------------------------------------------------------
# transformations


def rmcf_to_mcf(traj: FlowTrajectory) -> FlowTrajectory:
    """Map an RMCF run to the MCF ``M_tau = sqrt(-tau) M~_{-log(-tau)}``, tau in [-1, 0)."""
    if traj.mode != "RMCF":
        raise ValueError("rmcf_to_mcf needs an RMCF trajectory")
    out = FlowTrajectory("MCF", termination=traj.termination, message=traj.message)
    for g in traj.snapshots:
        scale = math.exp(-0.5 * g.time)
        out.snapshots.append(g.with_vertices(scale * g.vertices, time=-math.exp(-g.time)))
    for r in traj.records:
        scale = math.exp(-0.5 * r["time"])
        out.records.append(
            {
                "time": -math.exp(-r["time"]),
                "dt": r["dt"],
                "max_A": r["max_A"] / scale,
                # MCF has no rescaled quantities; keep the RMCF values for reference
                "min_Htilde": r["min_Htilde"],
                "max_Htilde": r["max_Htilde"],
                "gaussian_area": r["gaussian_area"],
            }
        )
    out.step_times = [-math.exp(-t) for t in traj.step_times]
    out.step_max_a = [a * math.exp(0.5 * t) for a, t in zip(traj.step_max_a, traj.step_times)]
    out.remesh_events = [-math.exp(-t) for t in traj.remesh_events]
    if traj.singular_time is not None:
        out.singular_time = -math.exp(-traj.singular_time)
    return out


def parabolic_rescale(traj: FlowTrajectory, spec: RescalingSpec, window: float | None = None) -> FlowTrajectory:
    """Rescaled family ``sigma (F(T + t/sigma^2) - y)`` with rescaled time ``sigma^2 (t - T)``.

    ``window`` (in rescaled time) requires stored snapshots covering
    ``(T - window/sigma^2, T)``.

    Raises
    ------
    InsufficientHistory
    """
    s2 = spec.sigma**2
    y = np.asarray(spec.y, dtype=float)
    times = traj.times
    if window is not None:
        lo = spec.T - window / s2
        if len(times) == 0 or times[0] > lo + 1e-12 or times[-1] < lo:
            raise InsufficientHistory(
                f"no stored history on ({lo}, {spec.T}); trajectory spans [{times[0] if len(times) else None}, "
                f"{times[-1] if len(times) else None}]"
            )
        keep = [g for g in traj.snapshots if lo - 1e-12 <= g.time <= spec.T + 1e-12]
    else:
        keep = list(traj.snapshots)
    out = FlowTrajectory(traj.mode, termination=traj.termination)
    for g in keep:
        out.snapshots.append(g.with_vertices(spec.sigma * (g.vertices - y), time=s2 * (g.time - spec.T)))
    return out


def rescaled_velocity(geom: GeometrySnapshot, spec: RescalingSpec) -> np.ndarray:
    """Normal speed V (``dx/dt = -V n``) predicted for a parabolic rescaling of an RMCF."""
    y = np.asarray(spec.y, dtype=float)
    n = geom.normal
    return (
        geom.H
        - np.einsum("ij,ij->i", geom.vertices, n) / (2.0 * spec.sigma**2)
        - (n @ y) / (2.0 * spec.sigma)
    )
