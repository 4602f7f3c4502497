"""Jacobian of the collision map w.r.t. the smooth measure mu0 and the entropy production.

The map Jacobian factors into a flight part, the exponential of the integral of
p * dkappa/dtheta along the free path, and a twist part g'(phi) cos g(phi) / cos phi.
A finite-difference route through the full map is kept as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import _kernels
from .dynamics import (BilliardSystem, CollisionCoord, CollisionRecord, DynamicsError,
                       FlightSummary, TwistModel, billiard_map)


class NearSingularity(DynamicsError):
    """A finite-difference stencil straddles a discontinuity of the map."""


@dataclass(frozen=True)
class LogJacobianBreakdown:
    flow: float
    twist: float
    total: float
    s: float
    H: float


def breakdown(flow: float, twist: float, epsilon: float) -> LogJacobianBreakdown:
    total = flow + twist
    return LogJacobianBreakdown(flow, twist, total, -total, H_value(total, epsilon))


def record_breakdown(rec: CollisionRecord, epsilon: float) -> LogJacobianBreakdown:
    return breakdown(rec.log_jac_flow, rec.log_jac_twist, epsilon)


def log_jac_flow(rec: FlightSummary | CollisionRecord) -> float:
    return rec.curv_integral


def log_jac_twist(c_out: CollisionCoord, tw: TwistModel) -> float:
    """log mu0-Jacobian of the twist at the pre-twist outgoing coordinate ``c_out``."""
    if abs(c_out.phi) >= 0.5 * math.pi:
        raise ValueError("twist Jacobian undefined at tangential collisions")
    return _kernels.apply_twist(c_out.phi, tw.beta)[1]


def entropy_production(bd: LogJacobianBreakdown) -> float:
    return -bd.total


def H_value(total: float, epsilon: float) -> float:
    if epsilon == 0.0:
        return 0.0
    return math.expm1(total) / epsilon


def H_field(bd: LogJacobianBreakdown, epsilon: float) -> float:
    """(J - 1) / eps; 0 by convention when eps = 0."""
    return H_value(bd.total, epsilon)


def _wrapped_diff(a: float, b: float, length: float) -> float:
    return (a - b + 0.5 * length) % length - 0.5 * length


def _central_jacobian(c, base, route, orbit, length, h):
    pts = {}
    for key, dr, dphi in (("r+", h, 0.0), ("r-", -h, 0.0), ("p+", 0.0, h), ("p-", 0.0, -h)):
        try:
            p, it = orbit(CollisionCoord(c.scatterer_id, c.r + dr, c.phi + dphi))
        except DynamicsError as exc:
            raise NearSingularity(f"perturbed orbit failed at {c}: {exc}") from exc
        if it != route:
            raise NearSingularity(f"itinerary changes under perturbation at {c}")
        pts[key] = p
    return (_wrapped_diff(pts["r+"].r, pts["r-"].r, length) / (2 * h),
            _wrapped_diff(pts["p+"].r, pts["p-"].r, length) / (2 * h),
            (pts["r+"].phi - pts["r-"].phi) / (2 * h),
            (pts["p+"].phi - pts["p-"].phi) / (2 * h))


def log_jac_fd(c: CollisionCoord, sys: BilliardSystem, h: float = 1e-6, steps: int = 1,
               richardson: bool = True) -> float:
    """Central-difference log mu0-Jacobian of T^steps at ``c``.

    With ``richardson`` the partial derivatives from steps h and h/2 are combined to
    cancel the O(h^2) truncation term, which otherwise dominates next to almost
    tangential arrivals. Raises :class:`NearSingularity` when any perturbed point
    follows a different scatterer-to-scatterer itinerary than ``c``.
    """

    def orbit(p):
        itinerary = []
        for _ in range(steps):
            p, rec = billiard_map(p, sys)
            itinerary.append((p.scatterer_id, rec.image))
        return p, itinerary

    base, route = orbit(c)
    length = sys.table.scatterers[base.scatterer_id].length
    d = _central_jacobian(c, base, route, orbit, length, h)
    if richardson:
        d2 = _central_jacobian(c, base, route, orbit, length, 0.5 * h)
        d = tuple((4.0 * b - a) / 3.0 for a, b in zip(d, d2))
    drr, drp, dpr, dpp = d
    det = drr * dpp - drp * dpr
    return math.log(abs(det)) + math.log(math.cos(base.phi)) - math.log(math.cos(c.phi))
