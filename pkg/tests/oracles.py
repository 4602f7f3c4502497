"""Slow reference implementations written without the package kernels.

Geometry conventions are restated here from scratch: the boundary point at
arclength r sits at angle -r/R from the +x axis, the outward normal is
(cos w, sin w), the tangent is (sin w, -cos w), and an outgoing angle phi
gives velocity cos(phi) n + sin(phi) t.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp


def frame(center, radius, r):
    w = -r / radius
    n = np.array([math.cos(w), math.sin(w)])
    return np.asarray(center) + radius * n, n, np.array([n[1], -n[0]])


def ode_map(centers, radii, field, sid, r, phi, reach=3, rtol=1e-13, atol=1e-15):
    """One collision by integrating the thermostatted flow with event detection.

    Returns (sid', r', phi', tau, dq, flow_log_jac) where the last entry is the
    integral of -(E . velocity) along the flight.
    """
    e1, e2 = field
    pos, n, t = frame(centers[sid], radii[sid], r)
    v = math.cos(phi) * n + math.sin(phi) * t
    th0 = math.atan2(v[1], v[0])

    def rhs(_, y):
        c, s = math.cos(y[2]), math.sin(y[2])
        return [c, s, -e1 * s + e2 * c, -e1 * c - e2 * s]

    images = []
    for j, (c, rad) in enumerate(zip(centers, radii)):
        for ix in range(-reach, reach + 1):
            for iy in range(-reach, reach + 1):
                if j == sid and ix == 0 and iy == 0:
                    continue
                images.append((j, ix, iy, c[0] + ix, c[1] + iy, rad))

    def make_event(im):
        def ev(_, y):
            return math.hypot(y[0] - im[3], y[1] - im[4]) - im[5]
        ev.terminal = True
        ev.direction = -1
        return ev

    events = [make_event(im) for im in images]
    sol = solve_ivp(rhs, (0.0, 20.0), [pos[0], pos[1], th0, 0.0], method="DOP853",
                    rtol=rtol, atol=atol, events=events, max_step=0.01)
    hits = [(te[0], k) for k, te in enumerate(sol.t_events) if len(te)]
    tau, k = min(hits)
    y = sol.y_events[k][0]
    j, cx, cy, rad = images[k][0], images[k][3], images[k][4], images[k][5]
    nrm = np.array([y[0] - cx, y[1] - cy]) / rad
    vin = np.array([math.cos(y[2]), math.sin(y[2])])
    vout = vin - 2.0 * (vin @ nrm) * nrm
    tang = np.array([nrm[1], -nrm[0]])
    w = math.atan2(nrm[1], nrm[0])
    r1 = (-w * rad) % (2.0 * math.pi * rad)
    phi1 = math.atan2(vout @ tang, vout @ nrm)
    return j, r1, phi1, tau, (y[0] - pos[0], y[1] - pos[1]), y[3]


def ray_free_path(centers, radii, sid, r, phi, reach=12):
    """Straight free path from a boundary point by brute force over lattice images."""
    pos, n, t = frame(centers[sid], radii[sid], r)
    d = math.cos(phi) * n + math.sin(phi) * t
    best = math.inf
    for j, (c, rad) in enumerate(zip(centers, radii)):
        off = np.arange(-reach, reach + 1)
        gx, gy = np.meshgrid(off + c[0], off + c[1], indexing="ij")
        mx = gx.ravel() - pos[0]
        my = gy.ravel() - pos[1]
        b = mx * d[0] + my * d[1]
        disc = b * b - (mx * mx + my * my - rad * rad)
        ok = (disc >= 0) & (b > 0)
        if j == sid:
            ok &= ~((np.abs(gx.ravel() - c[0]) < 0.5) & (np.abs(gy.ravel() - c[1]) < 0.5))
        if ok.any():
            best = min(best, float(np.min(b[ok] - np.sqrt(disc[ok]))))
    return best


def log_mgf(S, a):
    """log mean exp(-a S) computed with a shift for stability."""
    x = -a * np.asarray(S, dtype=float)
    m = x.max()
    return m + math.log(np.mean(np.exp(x - m)))


def legendre_brute(a_grid, e_values, z):
    return max(-a * z - e for a, e in zip(a_grid, e_values))


def autocov(x, j):
    x = np.asarray(x, dtype=float)
    m = x.mean()
    return float(np.mean((x[: len(x) - j] - m) * (x[j:] - m)))
