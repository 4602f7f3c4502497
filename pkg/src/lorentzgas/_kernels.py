"""Compiled inner loops for the thermostatted constant-field billiard map.

Between collisions the isokinetic flow with a constant field E = eps*(cos a, sin a)
obeys psi' = -eps*sin(psi), psi = theta - a, which integrates in closed form:

    tan(psi(t)/2) = exp(-eps*t) * tan(psi0/2)
    along-field displacement   A(t) = t + log(cos^2(psi0/2) + k^2 sin^2(psi0/2)) / eps
    across-field displacement  P(t) = -(psi(t) - psi0) / eps,      k = exp(-eps*t)

For every circle the squared-distance function m(t) = |q(t) - c|^2 - R^2 is convex
while eps*|q - c| < 1 (its second derivative is 2*(1 + theta' * (q - c) x v)), so the
first crossing is found by a safeguarded Newton search on a bracket that is always
known to contain exactly one root.

All functions here take plain floats/arrays so they can run without the GIL.
"""

import math

import numpy as np
from numba import njit

OK = 0
GRAZING = 1
HORIZON = 2
PENETRATION = 3

HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi
INF = np.inf

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


@njit(cache=True, nogil=True)
def path_point(t, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps):
    """Position and heading at time t along the flight started at (x0, y0, th0)."""
    if eps == 0.0:
        return x0 + t * c0, y0 + t * s0, th0
    em = math.expm1(-eps * t)
    k = 1.0 + em
    em2 = math.expm1(-2.0 * eps * t)
    along = t + math.log1p(hs * hs * em2) / eps
    dpsi = 2.0 * math.atan(em * hs * hc / (hc * hc + k * hs * hs))
    across = -dpsi / eps
    return (x0 + along * ca - across * sa,
            y0 + along * sa + across * ca,
            th0 + dpsi)


@njit(cache=True, nogil=True)
def _m_terms(t, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad):
    x, y, th = path_point(t, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps)
    dx = x - cx
    dy = y - cy
    ct = math.cos(th)
    st = math.sin(th)
    thdot = -eps * (st * ca - ct * sa)
    m = dx * dx + dy * dy - rad * rad
    m1 = 2.0 * (dx * ct + dy * st)
    m2 = 2.0 * (1.0 + thdot * (dy * ct - dx * st))
    return m, m1, m2


@njit(cache=True, nogil=True)
def _root_m(a, b, guess, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad):
    # m(a) > 0 > m(b); m decreasing on [a, b]
    t = guess
    if not (a < t < b):
        t = 0.5 * (a + b)
    for _ in range(200):
        m, m1, _m2 = _m_terms(t, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
        if m > 0.0:
            a = t
        else:
            b = t
        if m == 0.0:
            return t
        tn = t - m / m1 if m1 != 0.0 else 0.5 * (a + b)
        if not (a < tn < b):
            tn = 0.5 * (a + b)
        if abs(tn - t) <= 1e-16 * (1.0 + t) or b - a <= 1e-16 * (1.0 + b):
            return tn
        t = tn
    return t


@njit(cache=True, nogil=True)
def _argmin_m(a, b, guess, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad):
    # m'(a) < 0 < m'(b); m' increasing on [a, b]
    t = guess
    if not (a < t < b):
        t = 0.5 * (a + b)
    for _ in range(200):
        m, m1, m2 = _m_terms(t, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
        if m1 < 0.0:
            a = t
        else:
            b = t
        tn = t - m1 / m2 if m2 > 0.0 else 0.5 * (a + b)
        if not (a < tn < b):
            tn = 0.5 * (a + b)
        if abs(tn - t) <= 1e-15 * (1.0 + t) or b - a <= 1e-15 * (1.0 + b):
            return tn
        t = tn
    return t


@njit(cache=True, nogil=True)
def hit_time(dx, dy, rad, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, tcap):
    """First time the flight enters the circle centred at (x0 - dx, y0 - dy).

    Returns inf for a miss (or a hit later than ``tcap``) and -1 when the start
    point already lies inside the circle.
    """
    dist2 = dx * dx + dy * dy
    m0 = dist2 - rad * rad
    if m0 < -1e-10:
        return -1.0
    mp0 = 2.0 * (dx * c0 + dy * s0)
    if mp0 >= 0.0:
        return INF
    if math.sqrt(dist2) - rad > tcap:
        return INF
    sl = -0.5 * mp0
    dperp2 = max(dist2 - sl * sl, 0.0)
    if eps == 0.0:
        disc = sl * sl - m0
        if dperp2 >= rad * rad or disc <= 0.0:
            return INF
        return max(m0, 0.0) / (sl + math.sqrt(disc))
    bend = 0.5 * eps * tcap * tcap
    if dperp2 > (rad + bend) * (rad + bend):
        return INF
    cx = x0 - dx
    cy = y0 - dy
    disc = sl * sl - m0
    if dperp2 < rad * rad and disc > 0.0:
        tg = max(m0, 0.0) / (sl + math.sqrt(disc))
    else:
        tg = sl
    m, m1, m2 = _m_terms(tg, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
    if m < 0.0:
        return _root_m(0.0, tg, tg, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
    if m1 < 0.0:
        lo = tg
        hi = tg + rad + 1e-3
        for _ in range(60):
            mh, m1h, m2h = _m_terms(hi, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
            if m1h > 0.0:
                break
            lo = hi
            hi = 2.0 * hi
            if lo > 2.0 * tcap + 2.0 * rad:
                return INF
    else:
        lo = 0.0
        hi = tg
    tmin = _argmin_m(lo, hi, sl, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
    mmin, _a, _b = _m_terms(tmin, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)
    if mmin >= 0.0:
        return INF
    return _root_m(0.0, tmin, tg, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps, cx, cy, rad)


@njit(cache=True, nogil=True)
def flight(sid, x0, y0, th0, centers, radii, e1, e2, rho0, max_flight):
    """Locate the next collision of the flight leaving scatterer ``sid`` at (x0, y0).

    Returns (status, j, ix, iy, tau, x, y, theta) with (ix, iy) the lattice offset
    of the struck image and (x, y, theta) the unwrapped incidence state.
    """
    eps = math.hypot(e1, e2)
    if eps > 0.0:
        ca = e1 / eps
        sa = e2 / eps
    else:
        ca = 1.0
        sa = 0.0
    c0 = math.cos(th0)
    s0 = math.sin(th0)
    psi0 = th0 - math.atan2(sa, ca)
    hc = math.cos(0.5 * psi0)
    hs = math.sin(0.5 * psi0)
    nsc = radii.shape[0]
    rmax = 0.0
    for j in range(nsc):
        rmax = max(rmax, radii[j])
    lim = rho0
    best = INF
    bj = -1
    bix = 0
    biy = 0
    while True:
        best = INF
        for j in range(nsc):
            cjx = centers[j, 0]
            cjy = centers[j, 1]
            rj = radii[j]
            lox = int(math.floor(x0 - lim - cjx))
            hix = int(math.ceil(x0 + lim - cjx))
            loy = int(math.floor(y0 - lim - cjy))
            hiy = int(math.ceil(y0 + lim - cjy))
            for ix in range(lox, hix + 1):
                for iy in range(loy, hiy + 1):
                    if j == sid and ix == 0 and iy == 0:
                        continue
                    dx = x0 - (cjx + ix)
                    dy = y0 - (cjy + iy)
                    if dx * dx + dy * dy > lim * lim:
                        continue
                    t = hit_time(dx, dy, rj, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps,
                                 min(best, lim))
                    if t < 0.0:
                        return PENETRATION, j, ix, iy, 0.0, x0, y0, th0
                    if t < best:
                        best = t
                        bj = j
                        bix = ix
                        biy = iy
        if best <= lim - rmax:
            break
        if lim - rmax >= max_flight:
            return HORIZON, -1, 0, 0, best, x0, y0, th0
        lim = min(2.0 * lim, max_flight + rmax)
    if best > max_flight:
        return HORIZON, -1, 0, 0, best, x0, y0, th0
    x, y, th = path_point(best, x0, y0, th0, c0, s0, hc, hs, ca, sa, eps)
    return OK, bj, bix, biy, best, x, y, th


@njit(cache=True, nogil=True)
def curvature_integral(tau, th0, e1, e2):
    """Gauss-Legendre quadrature of p * dkappa/dtheta = -E . v along the flight."""
    eps = math.hypot(e1, e2)
    if eps == 0.0 or tau == 0.0:
        return 0.0
    psi0 = th0 - math.atan2(e2, e1)
    hc = math.cos(0.5 * psi0)
    hs = math.sin(0.5 * psi0)
    acc = 0.0
    for i in range(_GL_X.shape[0]):
        t = 0.5 * tau * (1.0 + _GL_X[i])
        k2 = math.exp(-2.0 * eps * t)
        cpsi = (hc * hc - k2 * hs * hs) / (hc * hc + k2 * hs * hs)
        acc += _GL_W[i] * (-eps * cpsi)
    return 0.5 * tau * acc


@njit(cache=True, nogil=True)
def launch(sid, r, phi, centers, radii):
    """Unwrapped position and heading of the outgoing state (sid, r, phi)."""
    rad = radii[sid]
    om = -r / rad
    nx = math.cos(om)
    ny = math.sin(om)
    x0 = centers[sid, 0] + rad * nx
    y0 = centers[sid, 1] + rad * ny
    cp = math.cos(phi)
    sp = math.sin(phi)
    vx = cp * nx + sp * ny
    vy = cp * ny - sp * nx
    return x0, y0, math.atan2(vy, vx)


@njit(cache=True, nogil=True)
def incidence(j, ix, iy, x, y, th, centers, radii):
    """Arclength and pre-twist outgoing angle for a specular bounce at (x, y)."""
    rad = radii[j]
    dx = x - (centers[j, 0] + ix)
    dy = y - (centers[j, 1] + iy)
    d = math.hypot(dx, dy)
    nx = dx / d
    ny = dy / d
    vx = math.cos(th)
    vy = math.sin(th)
    # outgoing = v - 2 (v.n) n ; phi from normal toward clockwise tangent (ny, -nx)
    vn = vx * nx + vy * ny
    vt = vx * ny - vy * nx
    phi = math.atan2(vt, -vn)
    om = math.atan2(ny, nx)
    r = (-om) % TWO_PI * rad
    if r >= TWO_PI * rad:
        r = 0.0
    return r, phi


@njit(cache=True, nogil=True)
def apply_twist(phi, beta):
    """Angle twist phi -> phi + beta*(pi^2/4 - phi^2) and its log mu0-Jacobian."""
    if beta == 0.0:
        return phi, 0.0
    out = phi + beta * (0.25 * math.pi * math.pi - phi * phi)
    ljt = math.log(1.0 - 2.0 * beta * phi) + math.log(math.cos(out)) - math.log(math.cos(phi))
    return out, ljt


@njit(cache=True, nogil=True)
def step(sid, r, phi, centers, radii, e1, e2, beta, rho0, max_flight, graze_cut):
    """One application of the billiard map.

    Returns (status, j, r', phi', tau, dqx, dqy, log_jac_flow, log_jac_twist, ix, iy, phi_pre).
    """
    x0, y0, th0 = launch(sid, r, phi, centers, radii)
    status, j, ix, iy, tau, x, y, th = flight(sid, x0, y0, th0, centers, radii,
                                              e1, e2, rho0, max_flight)
    if status != OK:
        return status, j, r, phi, tau, 0.0, 0.0, 0.0, 0.0, ix, iy, phi
    r1, phi_pre = incidence(j, ix, iy, x, y, th, centers, radii)
    if abs(phi_pre) > HALF_PI - graze_cut:
        return GRAZING, j, r1, phi_pre, tau, x - x0, y - y0, 0.0, 0.0, ix, iy, phi_pre
    phi1, ljt = apply_twist(phi_pre, beta)
    ljf = curvature_integral(tau, th0, e1, e2)
    return OK, j, r1, phi1, tau, x - x0, y - y0, ljf, ljt, ix, iy, phi_pre


@njit(cache=True, nogil=True)
def run_orbits(sid0, r0, phi0, nsteps, centers, radii, e1, e2, beta, rho0, max_flight,
               graze_cut, s_out, dq_out, tau_out, final, status_out):
    """Iterate ``nsteps`` collisions from each initial point, writing s, dq, tau."""
    n = sid0.shape[0]
    keep_dq = dq_out.shape[0] == n
    keep_tau = tau_out.shape[0] == n
    for i in range(n):
        sid = sid0[i]
        r = r0[i]
        phi = phi0[i]
        st = OK
        for k in range(nsteps):
            res = step(sid, r, phi, centers, radii, e1, e2, beta, rho0, max_flight, graze_cut)
            st = res[0]
            if st != OK:
                break
            sid = res[1]
            r = res[2]
            phi = res[3]
            s_out[i, k] = -(res[7] + res[8])
            if keep_dq:
                dq_out[i, k, 0] = res[5]
                dq_out[i, k, 1] = res[6]
            if keep_tau:
                tau_out[i, k] = res[4]
        status_out[i] = st
        final[i, 0] = sid
        final[i, 1] = r
        final[i, 2] = phi


@njit(cache=True, nogil=True)
def map_points(sid0, r0, phi0, centers, radii, e1, e2, beta, rho0, max_flight, graze_cut,
               out_sid, out_r, out_phi, out_logjac, out_status):
    """Apply the map once to every point; log J = flow + twist part."""
    for i in range(sid0.shape[0]):
        res = step(sid0[i], r0[i], phi0[i], centers, radii, e1, e2, beta, rho0,
                   max_flight, graze_cut)
        out_status[i] = res[0]
        out_sid[i] = res[1]
        out_r[i] = res[2]
        out_phi[i] = res[3]
        out_logjac[i] = res[7] + res[8]


@njit(cache=True, nogil=True)
def straight_free_paths(sid0, r0, phi0, centers, radii, max_len, out):
    """Straight-ray free path from each boundary point; inf when it exceeds max_len."""
    for i in range(sid0.shape[0]):
        x0, y0, th0 = launch(sid0[i], r0[i], phi0[i], centers, radii)
        status, j, ix, iy, tau, x, y, th = flight(sid0[i], x0, y0, th0, centers, radii,
                                                  0.0, 0.0, min(1.5, max_len + 1.0),
                                                  max_len)
        out[i] = tau if status == OK else INF
