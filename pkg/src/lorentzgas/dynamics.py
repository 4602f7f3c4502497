"""Forced billiard flow, reflections with optional twist, and the collision map.

Two flight integrators are available:

* ``analytic`` -- closed-form isokinetic flow for ``NoForce`` and
  ``ThermostattedConstantField`` (compiled, used for all bulk sampling);
* ``rk4`` -- fixed-step classical RK4 with event location by bisection on the
  signed distance to the scatterer images in the 3x3 neighbourhood. Works for any
  force model and serves as an independent check of the analytic flights.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import _kernels
from .geometry import TableConfig, boundary_point, check_table, free_path_bounds, torus_wrap

HALF_PI = 0.5 * math.pi


class DynamicsError(RuntimeError):
    """Base class for orbit failures."""


class GrazingCollision(DynamicsError):
    pass


class HorizonViolation(DynamicsError):
    pass


class Penetration(DynamicsError):
    pass


_STATUS_ERRORS = {
    _kernels.GRAZING: GrazingCollision,
    _kernels.HORIZON: HorizonViolation,
    _kernels.PENETRATION: Penetration,
}


# ---------------------------------------------------------------------------
# force and twist models


@dataclass(frozen=True)
class NoForce:
    @property
    def epsilon(self) -> float:
        return 0.0


@dataclass(frozen=True)
class ThermostattedConstantField:
    """Constant field E = (e1, e2) with an isokinetic thermostat holding |p| = 1."""

    e1: float
    e2: float = 0.0

    @property
    def epsilon(self) -> float:
        return math.hypot(self.e1, self.e2)


@dataclass(frozen=True)
class GeneralField:
    """Arbitrary thermostatted force ``force(x, y, theta) -> (F1, F2)`` (speed held at 1).

    ``dkappa_dtheta(x, y, theta)`` must return the theta-derivative of the trajectory
    curvature. Use :meth:`position_dependent` for fields that depend on position only.
    """

    force: Callable[[float, float, float], tuple[float, float]]
    dkappa_dtheta: Callable[[float, float, float], float]
    epsilon: float

    @classmethod
    def position_dependent(cls, force: Callable[[float, float], tuple[float, float]],
                           epsilon: float) -> GeneralField:
        def f(x, y, th):
            return force(x, y)

        def dk(x, y, th):
            f1, f2 = force(x, y)
            return -f1 * math.cos(th) - f2 * math.sin(th)

        return cls(f, dk, epsilon)


ForceModel = Union[NoForce, ThermostattedConstantField, GeneralField]


@dataclass(frozen=True)
class IdentityTwist:
    beta = 0.0


@dataclass(frozen=True)
class AngleTwist:
    """phi -> phi + beta*(pi^2/4 - phi^2); fixes tangential collisions."""

    beta: float

    def __post_init__(self):
        if not abs(self.beta) < 1.0 / math.pi:
            raise ValueError(f"|beta| must be < 1/pi, got {self.beta}")


TwistModel = Union[IdentityTwist, AngleTwist]


def force_vector(f: ForceModel, x: float, y: float, th: float) -> tuple[float, float]:
    if isinstance(f, NoForce):
        return 0.0, 0.0
    if isinstance(f, ThermostattedConstantField):
        return f.e1, f.e2
    return f.force(x, y, th)


def dkappa_dtheta(f: ForceModel, x: float, y: float, th: float) -> float:
    if isinstance(f, NoForce):
        return 0.0
    if isinstance(f, ThermostattedConstantField):
        return -f.e1 * math.cos(th) - f.e2 * math.sin(th)
    return f.dkappa_dtheta(x, y, th)


def twist_angle(tw: TwistModel, phi: float) -> float:
    return _kernels.apply_twist(phi, tw.beta)[0]


# ---------------------------------------------------------------------------
# states and records


@dataclass(frozen=True)
class CollisionCoord:
    scatterer_id: int
    r: float
    phi: float


@dataclass(frozen=True)
class FlowState:
    """Point of the flow; (x + wx, y + wy) is the unwrapped position."""

    x: float
    y: float
    theta: float
    wx: int = 0
    wy: int = 0
    p: float = 1.0

    @property
    def unwrapped(self) -> tuple[float, float]:
        return self.x + self.wx, self.y + self.wy


@dataclass(frozen=True)
class Incidence:
    """Pre-collision state: unwrapped position on image ``offset`` of a scatterer."""

    scatterer_id: int
    offset: tuple[int, int]
    position: tuple[float, float]
    theta: float
    tau: float


@dataclass(frozen=True)
class FlightSummary:
    tau: float
    dq: tuple[float, float]
    curv_integral: float


@dataclass(frozen=True)
class CollisionRecord:
    start: CollisionCoord
    end: CollisionCoord
    tau: float
    dq: tuple[float, float]
    curv_integral: float
    log_jac_flow: float
    log_jac_twist: float
    log_jac_total: float
    s: float
    phi_pre_twist: float
    image: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class BilliardSystem:
    """Table plus forces plus numerical parameters; defines the collision map."""

    table: TableConfig = field(default_factory=TableConfig.default)
    force: ForceModel = field(default_factory=NoForce)
    twist: TwistModel = field(default_factory=IdentityTwist)
    grazing_cut: float = 1e-9
    step: float | None = None
    max_flight_time: float | None = None
    integrator: str = "auto"

    def __post_init__(self):
        check_table(self.table)
        if self.integrator not in ("auto", "analytic", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.integrator == "analytic" and isinstance(self.force, GeneralField):
            raise ValueError("the analytic integrator needs a constant (or no) field")

    @property
    def epsilon(self) -> float:
        return self.force.epsilon

    @property
    def analytic(self) -> bool:
        if self.integrator == "rk4":
            return False
        return not isinstance(self.force, GeneralField)

    @property
    def field_vector(self) -> tuple[float, float]:
        if isinstance(self.force, ThermostattedConstantField):
            return self.force.e1, self.force.e2
        return 0.0, 0.0

    def free_path_bounds(self) -> tuple[float, float]:
        return free_path_bounds(self.table)

    @property
    def rk4_step(self) -> float:
        if self.step is not None:
            return self.step
        return min(1e-3, self.free_path_bounds()[0] / 20.0)

    @property
    def flight_limit(self) -> float:
        if self.max_flight_time is not None:
            return self.max_flight_time
        return 10.0 * self.free_path_bounds()[1]

    def kernel_args(self) -> tuple:
        """Positional arguments shared by the compiled map kernels."""
        return self._kernel_args

    @functools.cached_property
    def _kernel_args(self) -> tuple:
        if not self.analytic:
            raise ValueError("compiled kernels need the analytic integrator")
        e1, e2 = self.field_vector
        return (self.table.centers_array(), self.table.radii_array(), float(e1), float(e2),
                float(self.twist.beta), 1.5, float(self.flight_limit), float(self.grazing_cut))


# ---------------------------------------------------------------------------
# flow


def flow_derivative(st: FlowState, f: ForceModel) -> tuple[float, float, float]:
    """(xdot, ydot, thetadot) of the thermostatted flow at ``st``."""
    f1, f2 = force_vector(f, st.x, st.y, st.theta)
    c, s = math.cos(st.theta), math.sin(st.theta)
    return st.p * c, st.p * s, (-f1 * s + f2 * c) / st.p


def _departure(table: TableConfig, x: float, y: float, tol: float = 1e-9):
    """Scatterer whose boundary passes through (x, y): (id, ix, iy) or None."""
    centers = table.centers_array()
    for j, s in enumerate(table.scatterers):
        cx, cy = centers[j]
        ix = round(x - cx)
        iy = round(y - cy)
        if abs(math.hypot(x - cx - ix, y - cy - iy) - s.radius) < tol:
            return j, ix, iy
    return None


def _launch_state(table: TableConfig, c: CollisionCoord) -> FlowState:
    x0, y0, th0 = _kernels.launch(c.scatterer_id, c.r, c.phi, table.centers_array(),
                                  table.radii_array())
    wx, wy = math.floor(x0), math.floor(y0)
    return FlowState(x0 - wx, y0 - wy, th0, wx, wy)


def free_flight(start: FlowState, f: ForceModel, t: TableConfig, *, method: str = "auto",
                h: float | None = None, max_flight_time: float | None = None
                ) -> tuple[Incidence, FlightSummary]:
    """Fly from ``start`` to the next scatterer.

    Returns the incidence data (unwrapped position, heading, struck image) and the
    flight summary: free time, unwrapped displacement and the integral of
    p * dkappa/dtheta along the path.
    """
    if method == "auto":
        method = "rk4" if isinstance(f, GeneralField) else "analytic"
    bounds = free_path_bounds(t)
    tmax = max_flight_time if max_flight_time is not None else 10.0 * bounds[1]
    if method == "analytic":
        return _flight_analytic(start, f, t, tmax)
    if method == "rk4":
        step = h if h is not None else min(1e-3, bounds[0] / 20.0)
        return _flight_rk4(start, f, t, step, tmax)
    raise ValueError(f"unknown method {method!r}")


def _flight_analytic(start, f, t, tmax):
    if isinstance(f, GeneralField):
        raise ValueError("analytic flights need a constant (or no) field")
    e1, e2 = (f.e1, f.e2) if isinstance(f, ThermostattedConstantField) else (0.0, 0.0)
    dep = _departure(t, start.x, start.y)
    sid, sx, sy = dep if dep is not None else (-1, 0, 0)
    x0, y0 = start.x - sx, start.y - sy
    status, j, ix, iy, tau, x, y, th = _kernels.flight(
        sid, x0, y0, start.theta, t.centers_array(), t.radii_array(), e1, e2, 1.5, tmax)
    if status != _kernels.OK:
        raise _STATUS_ERRORS[status](f"flight from {start} failed with status {status}")
    ux, uy = start.unwrapped
    dq = (x - x0, y - y0)
    pos = (ux + dq[0], uy + dq[1])
    off = (ix + sx + start.wx, iy + sy + start.wy)
    curv = _kernels.curvature_integral(tau, start.theta, e1, e2)
    return Incidence(j, off, pos, th, tau), FlightSummary(tau, dq, curv)


def _rk4_rhs(f, y):
    X, Y, th, _ = y
    f1, f2 = force_vector(f, X % 1.0, Y % 1.0, th)
    c, s = math.cos(th), math.sin(th)
    return np.array([c, s, -f1 * s + f2 * c, dkappa_dtheta(f, X % 1.0, Y % 1.0, th)])


def _rk4(f, y, h):
    k1 = _rk4_rhs(f, y)
    k2 = _rk4_rhs(f, y + 0.5 * h * k1)
    k3 = _rk4_rhs(f, y + 0.5 * h * k2)
    k4 = _rk4_rhs(f, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _images(t: TableConfig, X: float, Y: float):
    centers = t.centers_array()
    radii = t.radii_array()
    bx, by = math.floor(X), math.floor(Y)
    rows = []
    for j in range(len(radii)):
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                ix, iy = bx + dx, by + dy
                rows.append((j, ix, iy, centers[j, 0] + ix, centers[j, 1] + iy, radii[j]))
    return rows


def _flight_rk4(start, f, t, h, tmax):
    y = np.array([*start.unwrapped, start.theta, 0.0])
    dep = _departure(t, *start.unwrapped)
    elapsed = 0.0

    def g_of(state, img):
        return math.hypot(state[0] - img[3], state[1] - img[4]) - img[5]

    def mp_of(state, img):
        return (state[0] - img[3]) * math.cos(state[2]) + (state[1] - img[4]) * math.sin(state[2])

    while elapsed < tmax:
        imgs = [im for im in _images(t, y[0], y[1])
                if dep is None or (im[0], im[1], im[2]) != dep]
        for im in imgs:
            if g_of(y, im) < -1e-10:
                raise Penetration(f"step starting inside scatterer {im[0]}")
        y1 = _rk4(f, y, h)
        best = None
        for im in imgs:
            g1 = g_of(y1, im)
            hi = None
            if g1 < 0.0:
                hi = h
            elif mp_of(y, im) < 0.0 < mp_of(y1, im):
                # the distance dips inside the step; locate its minimum
                lo_, hi_ = 0.0, h
                for _ in range(60):
                    mid = 0.5 * (lo_ + hi_)
                    if mp_of(_rk4(f, y, mid), im) < 0.0:
                        lo_ = mid
                    else:
                        hi_ = mid
                if g_of(_rk4(f, y, hi_), im) < 0.0:
                    hi = hi_
            if hi is None:
                continue
            lo = 0.0
            d = hi
            for _ in range(100):
                d = 0.5 * (lo + hi)
                g = g_of(_rk4(f, y, d), im)
                if abs(g) <= 1e-13:
                    break
                if g > 0.0:
                    lo = d
                else:
                    hi = d
            if best is None or d < best[0]:
                best = (d, im)
        if best is not None:
            d, im = best
            yh = _rk4(f, y, d)
            tau = elapsed + d
            ux, uy = start.unwrapped
            inc = Incidence(im[0], (im[1], im[2]), (yh[0], yh[1]), yh[2], tau)
            return inc, FlightSummary(tau, (yh[0] - ux, yh[1] - uy), yh[3])
        y = y1
        elapsed += h
        dep = None if dep is None or g_of(y, _dep_image(t, dep)) > h else dep
    raise HorizonViolation(f"no collision within {tmax}")


def _dep_image(t, dep):
    j, ix, iy = dep
    c = t.centers_array()[j]
    return (j, ix, iy, c[0] + ix, c[1] + iy, t.scatterers[j].radius)


def reflect(incoming: Incidence, tw: TwistModel, t: TableConfig, grazing_cut: float = 1e-9
            ) -> tuple[CollisionCoord, FlowState, float]:
    """Specular reflection followed by the twist.

    Returns the outgoing collision coordinate, the matching flow state and the
    pre-twist outgoing angle.
    """
    j = incoming.scatterer_id
    ix, iy = incoming.offset
    x, y = incoming.position
    r, phi = _kernels.incidence(j, ix, iy, x, y, incoming.theta, t.centers_array(),
                                t.radii_array())
    if abs(phi) > HALF_PI - grazing_cut:
        raise GrazingCollision(f"grazing collision on scatterer {j}: phi = {phi!r}")
    out = CollisionCoord(j, r, twist_angle(tw, phi))
    fr = boundary_point(t.scatterers[j], r)
    v = (math.cos(out.phi) * fr.normal[0] + math.sin(out.phi) * fr.tangent[0],
         math.cos(out.phi) * fr.normal[1] + math.sin(out.phi) * fr.tangent[1])
    wx, wy = math.floor(x), math.floor(y)
    px, py = torus_wrap((x, y))
    return out, FlowState(px, py, math.atan2(v[1], v[0]), wx, wy), phi


# ---------------------------------------------------------------------------
# the map


def billiard_map(c: CollisionCoord, sys: BilliardSystem) -> tuple[CollisionCoord, CollisionRecord]:
    """Apply T_E once, returning the image point and the full collision record."""
    if abs(c.phi) >= HALF_PI - sys.grazing_cut:
        raise GrazingCollision(f"start point is grazing: {c}")
    if sys.analytic:
        res = _kernels.step(c.scatterer_id, c.r, c.phi, *sys.kernel_args())
        status = res[0]
        if status != _kernels.OK:
            raise _STATUS_ERRORS[status](f"map failed from {c} with status {status}")
        nxt = CollisionCoord(int(res[1]), res[2], res[3])
        flow, tw = res[7], res[8]
        rec = CollisionRecord(c, nxt, res[4], (res[5], res[6]), flow, flow, tw, flow + tw,
                              -(flow + tw), res[11], (int(res[9]), int(res[10])))
        return nxt, rec
    st = _launch_state(sys.table, c)
    inc, summ = free_flight(st, sys.force, sys.table, method="rk4", h=sys.rk4_step,
                            max_flight_time=sys.flight_limit)
    nxt, _, phi_pre = reflect(inc, sys.twist, sys.table, sys.grazing_cut)
    tw = _kernels.apply_twist(phi_pre, sys.twist.beta)[1]
    flow = summ.curv_integral
    ox, oy = inc.offset
    rec = CollisionRecord(c, nxt, summ.tau, summ.dq, flow, flow, tw, flow + tw,
                          -(flow + tw), phi_pre, (ox - st.wx, oy - st.wy))
    return nxt, rec


def involution(c: CollisionCoord) -> CollisionCoord:
    """Velocity reversal at the same boundary point."""
    return CollisionCoord(c.scatterer_id, c.r, -c.phi)


def billiard_map_inverse(c: CollisionCoord, sys: BilliardSystem
                         ) -> tuple[CollisionCoord, CollisionRecord]:
    """T^-1 = i o T o i. The record describes the backward step from ``c``: its
    log-Jacobians are those of T^-1 at ``c``."""
    nxt, rec = billiard_map(involution(c), sys)
    prev = involution(nxt)
    back = CollisionRecord(c, prev, rec.tau, rec.dq, rec.curv_integral, rec.log_jac_flow,
                           rec.log_jac_twist, rec.log_jac_total, rec.s, -rec.phi_pre_twist,
                           rec.image)
    return prev, back


def coord_distance(a: CollisionCoord, b: CollisionCoord, t: TableConfig) -> float:
    """Max-norm distance in (r, phi) with r periodic; inf across scatterers."""
    if a.scatterer_id != b.scatterer_id:
        return math.inf
    length = t.scatterers[a.scatterer_id].length
    dr = abs((a.r - b.r + 0.5 * length) % length - 0.5 * length)
    return max(dr, abs(a.phi - b.phi))
