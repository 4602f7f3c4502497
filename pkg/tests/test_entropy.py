import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lorentzgas.dynamics import (AngleTwist, BilliardSystem, CollisionCoord, DynamicsError,
                                 IdentityTwist, ThermostattedConstantField, billiard_map)
from lorentzgas.entropy import (H_field, H_value, NearSingularity, breakdown, entropy_production,
                                log_jac_fd, log_jac_flow, log_jac_twist, record_breakdown)
from lorentzgas.geometry import TableConfig

TABLE = TableConfig.default()


def coord(sid, frac, phi):
    return CollisionCoord(sid, frac * TABLE.scatterers[sid].length, phi)


def test_unforced_flight_term_vanishes(free_system):
    _, rec = billiard_map(coord(0, 0.2, 0.4), free_system)
    assert log_jac_flow(rec) == 0.0


def test_identity_twist_term_vanishes():
    assert log_jac_twist(CollisionCoord(0, 0.1, 0.7), IdentityTwist()) == 0.0


@pytest.mark.parametrize("beta", [0.05, -0.2, 0.3])
def test_angle_twist_at_normal_incidence(beta):
    expected = math.log(math.cos(beta * math.pi ** 2 / 4))
    assert log_jac_twist(CollisionCoord(0, 0.1, 0.0), AngleTwist(beta)) == \
        pytest.approx(expected, rel=1e-14)


def test_twist_jacobian_undefined_at_tangency():
    with pytest.raises(ValueError):
        log_jac_twist(CollisionCoord(0, 0.1, math.pi / 2), AngleTwist(0.1))


@given(st.floats(-0.3, 0.3), st.floats(-1.5, 1.5))
def test_twist_jacobian_matches_difference_quotient(beta, phi):
    tw = AngleTwist(beta)

    def g(p):
        return p + beta * (math.pi ** 2 / 4 - p * p)

    h = 1e-6
    dg = (g(phi + h) - g(phi - h)) / (2 * h)
    expected = math.log(dg * math.cos(g(phi)) / math.cos(phi))
    assert log_jac_twist(CollisionCoord(0, 0.0, phi), tw) == pytest.approx(expected, abs=1e-7)


def test_unforced_fd_jacobian_is_zero(free_system):
    for c in (coord(0, 0.1, 0.3), coord(1, 0.6, -0.9), coord(0, 0.77, 1.1)):
        assert abs(log_jac_fd(c, free_system)) < 1e-6


@given(st.integers(0, 1), st.floats(0.0, 0.999), st.floats(-1.35, 1.35),
       st.floats(-0.1, 0.1), st.floats(-0.3, 0.3))
def test_closed_form_matches_finite_differences(sid, frac, phi, e1, beta):
    sys_ = BilliardSystem(TABLE, ThermostattedConstantField(e1, 0.02), AngleTwist(beta))
    c = coord(sid, frac, phi)
    try:
        _, rec = billiard_map(c, sys_)
        fd = log_jac_fd(c, sys_)
    except (NearSingularity, DynamicsError):
        assume(False)
    assert rec.log_jac_total == pytest.approx(fd, abs=1e-5)


def test_two_step_jacobian_is_additive(forced_system):
    c = coord(0, 0.2, 0.3)
    c1, r1 = billiard_map(c, forced_system)
    _, r2 = billiard_map(c1, forced_system)
    fd2 = log_jac_fd(c, forced_system, steps=2)
    assert fd2 == pytest.approx(r1.log_jac_total + r2.log_jac_total, abs=1e-5)


@given(st.integers(0, 1), st.floats(0.0, 0.999), st.floats(-1.4, 1.4),
       st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_current_identity(sid, frac, phi, e1, e2):
    sys_ = BilliardSystem(TABLE, ThermostattedConstantField(e1, e2))
    try:
        _, rec = billiard_map(coord(sid, frac, phi), sys_)
    except DynamicsError:
        assume(False)
    assert rec.log_jac_flow == pytest.approx(-(e1 * rec.dq[0] + e2 * rec.dq[1]), abs=1e-12)


def test_breakdown_fields(forced_system):
    _, rec = billiard_map(coord(1, 0.3, 0.5), forced_system)
    bd = record_breakdown(rec, 0.05)
    assert bd.total == bd.flow + bd.twist
    assert entropy_production(bd) == rec.s
    assert H_field(bd, 0.05) == pytest.approx(math.expm1(bd.total) / 0.05)


def test_H_is_zero_without_field():
    assert H_value(0.0, 0.0) == 0.0
    assert breakdown(0.0, 0.0, 0.0).s == 0.0


def test_H_tends_to_minus_current():
    dx = 0.37
    for eps, tol in ((1e-2, 1e-2), (1e-4, 1e-4), (1e-6, 1e-6)):
        assert H_value(-eps * dx, eps) == pytest.approx(-dx, abs=tol)


def test_fd_detects_itinerary_change(free_system):
    # an outgoing ray that just grazes the small disk: perturbations split the itinerary
    hits = 0
    for phi in np.linspace(-1.5, 1.5, 4001):
        try:
            log_jac_fd(coord(0, 0.125, float(phi)), free_system, h=1e-3)
        except NearSingularity:
            hits += 1
        except DynamicsError:
            pass
    assert hits > 0
