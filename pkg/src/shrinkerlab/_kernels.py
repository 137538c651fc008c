"""Compiled inner loops for the explicit flow.

The pointwise formulas mirror :mod:`shrinkerlab.geometry` exactly; the test
suite checks the two against each other.
"""

import math

import numpy as np
from numba import njit

# status codes returned by advance()
OK = 0
HIT_TIME = 1
HIT_CURVATURE = 2
HIT_STEPS = 3
NON_FINITE = -1
AXIS = -2

_STABILITY = 0.375


@njit(cache=True)
def _closed(x, capped):
    n = x.shape[0]
    if not capped:
        return x.copy()
    m = 2 * n - 2
    p = np.empty((m, 2))
    for i in range(n):
        p[i, 0] = x[i, 0]
        p[i, 1] = x[i, 1]
    for k in range(1, n - 1):
        j = n - 1 - k
        p[n - 1 + k, 0] = -x[j, 0]
        p[n - 1 + k, 1] = x[j, 1]
    return p


@njit(cache=True)
def _circle_frame(p, i, s):
    m = p.shape[0]
    a = (i - s) % m
    b = (i + s) % m
    fx = p[b, 0] - p[i, 0]
    fy = p[b, 1] - p[i, 1]
    bx = p[i, 0] - p[a, 0]
    by = p[i, 1] - p[a, 1]
    hp = math.hypot(fx, fy)
    hm = math.hypot(bx, by)
    epx, epy = fx / hp, fy / hp
    emx, emy = bx / hm, by / hm
    tx = hm * epx + hp * emx
    ty = hm * epy + hp * emy
    tn = math.hypot(tx, ty)
    chord = math.hypot(p[b, 0] - p[a, 0], p[b, 1] - p[a, 1])
    k = 2.0 * (emx * epy - emy * epx) / chord
    return tx / tn, ty / tn, k


@njit(cache=True)
def frames(x, revolution, capped):
    """Tangent, normal, kappa, rotational curvature, H, Htilde, A2 per vertex."""
    n = x.shape[0]
    p = _closed(x, capped)
    tan = np.empty((n, 2))
    nor = np.empty((n, 2))
    kap = np.empty(n)
    rot = np.zeros(n)
    H = np.empty(n)
    Ht = np.empty(n)
    A2 = np.empty(n)
    for i in range(n):
        t1x, t1y, k1 = _circle_frame(p, i, 1)
        t2x, t2y, k2 = _circle_frame(p, i, 2)
        tx = (4.0 * t1x - t2x) / 3.0
        ty = (4.0 * t1y - t2y) / 3.0
        tn = math.hypot(tx, ty)
        tx /= tn
        ty /= tn
        k = (4.0 * k1 - k2) / 3.0
        nx, ny = ty, -tx
        tan[i, 0], tan[i, 1] = tx, ty
        nor[i, 0], nor[i, 1] = nx, ny
        kap[i] = k
        if revolution:
            if capped and (i == 0 or i == n - 1):
                rot[i] = k
            else:
                rot[i] = nx / x[i, 0]
        H[i] = k + rot[i]
        A2[i] = k * k + rot[i] * rot[i]
        Ht[i] = H[i] - 0.5 * (x[i, 0] * nx + x[i, 1] * ny)
    return tan, nor, kap, rot, H, Ht, A2


@njit(cache=True)
def _monitor(A2, c, capped):
    n = A2.shape[0]
    w = np.empty(n)
    for i in range(n):
        w[i] = math.sqrt(1.0 + c * c * A2[i])
    tmp = np.empty(n)
    for _ in range(2):
        for i in range(n):
            tmp[i] = 0.25 * w[(i - 1) % n] + 0.5 * w[i] + 0.25 * w[(i + 1) % n]
        w[:] = tmp
    if capped:
        w[0] = w[1]
        w[n - 1] = w[n - 2]
    return w


@njit(cache=True)
def advance(
    x,
    t,
    mcf,
    revolution,
    capped,
    cfl,
    omega,
    monitor_c,
    t_stop,
    a_stop,
    max_steps,
    fixed_dt,
    dt_max,
    hist_t,
    hist_dt,
    hist_a,
):
    """Forward-Euler steps with simultaneous tangential redistribution.

    Runs until ``t >= t_stop``, ``max|A| >= a_stop`` or ``max_steps`` steps.
    Returns (x, t, steps, status, last_dt); per-step (t, dt, max|A|) are
    written into the ``hist_*`` buffers (which must hold ``max_steps``).
    """
    n = x.shape[0]
    x = x.copy()
    status = HIT_STEPS
    steps = 0
    dt = 0.0
    while steps < max_steps:
        tan, nor, kap, rot, H, Ht, A2 = frames(x, revolution, capped)
        hmin = 1e300
        ne = n - 1 if capped else n
        for i in range(ne):
            j = (i + 1) % n
            h = math.hypot(x[j, 0] - x[i, 0], x[j, 1] - x[i, 1])
            if h < hmin:
                hmin = h
        amax2 = 0.0
        for i in range(n):
            if A2[i] > amax2:
                amax2 = A2[i]
        if fixed_dt > 0.0:
            dt = fixed_dt
        else:
            lim = 2.0 * _STABILITY * hmin * hmin
            if revolution:
                lim *= 0.5
            dt = min(cfl * min(lim, 1.0 / amax2), dt_max)
            if t + dt > t_stop:
                dt = t_stop - t
        # tangential redistribution toward equal (weighted) spacing
        delta = np.zeros(n)
        if omega > 0.0:
            use_w = monitor_c > 0.0
            if use_w:
                w = _monitor(A2, monitor_c, capped)
            for i in range(n):
                if capped and (i == 0 or i == n - 1):
                    continue
                ip = (i + 1) % n
                im = (i - 1) % n
                hp = math.hypot(x[ip, 0] - x[i, 0], x[ip, 1] - x[i, 1])
                hm = math.hypot(x[i, 0] - x[im, 0], x[i, 1] - x[im, 1])
                if use_w:
                    wp = 0.5 * (w[i] + w[ip])
                    wm = 0.5 * (w[i] + w[im])
                    delta[i] = omega * (wp * hp - wm * hm) / (wp + wm)
                else:
                    delta[i] = 0.5 * omega * (hp - hm)
        new = np.empty_like(x)
        for i in range(n):
            v = H[i] if mcf else Ht[i]
            d = delta[i]
            s = -dt * v - 0.5 * kap[i] * d * d
            new[i, 0] = x[i, 0] + s * nor[i, 0] + d * tan[i, 0]
            new[i, 1] = x[i, 1] + s * nor[i, 1] + d * tan[i, 1]
            if not (math.isfinite(new[i, 0]) and math.isfinite(new[i, 1])):
                return x, t, steps, NON_FINITE, dt
        if capped:
            new[0, 0] = 0.0
            new[n - 1, 0] = 0.0
        if revolution:
            lo = 1 if capped else 0
            hi = n - 1 if capped else n
            for i in range(lo, hi):
                if new[i, 0] <= 0.0:
                    return x, t, steps, AXIS, dt
        x = new
        t = t + dt
        if fixed_dt <= 0.0 and t_stop - t <= 1e-13 * max(1.0, abs(t_stop)):
            t = t_stop
        # curvature of the new state is measured at the start of the next
        # step; record the pre-step value here and let the caller re-check
        hist_t[steps] = t
        hist_dt[steps] = dt
        hist_a[steps] = math.sqrt(amax2)
        steps += 1
        if fixed_dt <= 0.0 and t >= t_stop:
            status = HIT_TIME
            break
        if math.sqrt(amax2) >= a_stop:
            status = HIT_CURVATURE
            break
    return x, t, steps, status, dt
