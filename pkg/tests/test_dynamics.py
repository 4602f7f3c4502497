import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lorentzgas.dynamics import (AngleTwist, BilliardSystem, CollisionCoord, FlowState,
                                 GeneralField, GrazingCollision, HorizonViolation, Incidence,
                                 NoForce, ThermostattedConstantField, billiard_map,
                                 billiard_map_inverse, coord_distance, flow_derivative,
                                 involution, reflect, twist_angle)
from lorentzgas.geometry import boundary_point

from oracles import ode_map

# (scatterer, r, phi, tau, flow log-Jacobian) after one map from (A, 0.3, 0.2) at E = (0.05, 0),
# produced by the event-detecting ODE oracle
FROZEN_E005 = (1, 0.7819606778757822, -0.17737053534253408, 0.10881866301205481,
               -0.0031746717262075546)


def points(table, max_phi=1.4):
    return st.builds(
        lambda sid, fr, phi: CollisionCoord(sid, fr * table.scatterers[sid].length, phi),
        st.integers(0, len(table.scatterers) - 1), st.floats(0.0, 0.999999),
        st.floats(-max_phi, max_phi))


def test_flow_derivative_examples():
    assert flow_derivative(FlowState(0.1, 0.2, 0.3), NoForce()) == \
        pytest.approx((math.cos(0.3), math.sin(0.3), 0.0))
    eps = 0.05
    f = ThermostattedConstantField(eps, 0.0)
    assert flow_derivative(FlowState(0.0, 0.0, math.pi / 2), f)[2] == pytest.approx(-eps)
    assert flow_derivative(FlowState(0.0, 0.0, 0.0), f)[2] == 0.0


def test_normal_incidence_reverses_direction(table):
    fr = boundary_point(table.scatterers[0], 0.5)
    inc = Incidence(0, (0, 0), fr.position, math.atan2(-fr.normal[1], -fr.normal[0]), 0.3)
    out, state, phi_pre = reflect(inc, AngleTwist(0.0), table)
    assert out.phi == pytest.approx(0.0, abs=1e-15)
    assert out.r == pytest.approx(0.5)
    assert (math.cos(state.theta), math.sin(state.theta)) == pytest.approx(fr.normal)


@pytest.mark.parametrize("beta", [0.0, 0.1, -0.3])
def test_twist_fixes_tangential_angles(beta):
    tw = AngleTwist(beta)
    for phi in (math.pi / 2, -math.pi / 2):
        assert twist_angle(tw, phi) == pytest.approx(phi, abs=1e-15)


def test_twist_rejects_large_beta():
    with pytest.raises(ValueError):
        AngleTwist(1.0 / math.pi)


@given(st.floats(-1.5, 1.5), st.floats(0.0, 2.5))
def test_specular_law(phi_in, r):
    from lorentzgas.geometry import TableConfig
    table = TableConfig.default()
    fr = boundary_point(table.scatterers[0], r)
    n, t = np.array(fr.normal), np.array(fr.tangent)
    vin = -math.cos(phi_in) * n + math.sin(phi_in) * t
    inc = Incidence(0, (0, 0), fr.position, math.atan2(vin[1], vin[0]), 0.2)
    out, _, _ = reflect(inc, AngleTwist(0.0), table, grazing_cut=0.0)
    assert out.phi == pytest.approx(phi_in, abs=1e-12)


def test_diametral_period_two_orbit(free_system):
    nxt, rec = billiard_map(CollisionCoord(0, 0.0, 0.0), free_system)
    assert nxt.scatterer_id == 0
    assert nxt.r == pytest.approx(math.pi * 0.4, abs=1e-14)
    assert nxt.phi == pytest.approx(0.0, abs=1e-14)
    assert rec.tau == pytest.approx(0.2, abs=1e-14)
    back, _ = billiard_map(nxt, free_system)
    assert back.r == pytest.approx(0.0, abs=1e-14)


def test_forced_map_regression(table):
    nxt, rec = billiard_map(CollisionCoord(0, 0.3, 0.2),
                            BilliardSystem(table, ThermostattedConstantField(0.05, 0.0)))
    sid, r, phi, tau, flow = FROZEN_E005
    assert nxt.scatterer_id == sid
    assert (nxt.r, nxt.phi, rec.tau, rec.log_jac_flow) == \
        pytest.approx((r, phi, tau, flow), rel=0, abs=1e-12)


def test_map_matches_ode_oracle(table):
    field = (0.04, -0.03)
    sys_ = BilliardSystem(table, ThermostattedConstantField(*field))
    g = np.random.default_rng(11)
    for _ in range(15):
        sid = int(g.integers(2))
        c = CollisionCoord(sid, g.uniform(0, table.scatterers[sid].length), g.uniform(-1.3, 1.3))
        nxt, rec = billiard_map(c, sys_)
        j, r1, phi1, tau, dq, flow = ode_map(table.centers_array(), table.radii_array(), field,
                                             c.scatterer_id, c.r, c.phi)
        assert j == nxt.scatterer_id
        assert coord_distance(nxt, CollisionCoord(j, r1, phi1), table) < 1e-10
        assert rec.tau == pytest.approx(tau, abs=1e-10)
        assert rec.dq == pytest.approx(dq, abs=1e-10)
        assert rec.log_jac_flow == pytest.approx(flow, abs=1e-10)


def test_rk4_route_agrees_with_closed_form(table):
    f = ThermostattedConstantField(0.05, 0.02)
    exact = BilliardSystem(table, f)
    rk4 = BilliardSystem(table, f, integrator="rk4", step=2e-3)
    for c in (CollisionCoord(0, 0.3, 0.2), CollisionCoord(1, 1.0, -0.7)):
        a, ra = billiard_map(c, exact)
        b, rb = billiard_map(c, rk4)
        assert coord_distance(a, b, table) < 1e-9
        assert ra.log_jac_flow == pytest.approx(rb.log_jac_flow, abs=1e-9)


def test_general_field_matches_constant_field(table):
    eps = 0.05
    gen = GeneralField.position_dependent(lambda x, y: (eps, 0.0), eps)
    a, ra = billiard_map(CollisionCoord(0, 0.3, 0.2),
                         BilliardSystem(table, gen, step=2e-3))
    b, rb = billiard_map(CollisionCoord(0, 0.3, 0.2),
                         BilliardSystem(table, ThermostattedConstantField(eps)))
    assert coord_distance(a, b, table) < 1e-9
    assert ra.s == pytest.approx(rb.s, abs=1e-9)


@given(st.data())
def test_reversibility(data):
    from lorentzgas.geometry import TableConfig
    table = TableConfig.default()
    sys_ = BilliardSystem(table, ThermostattedConstantField(0.05, 0.01))
    c = data.draw(points(table))
    try:
        nxt, _ = billiard_map(c, sys_)
        back, _ = billiard_map(involution(nxt), sys_)
    except GrazingCollision:
        assume(False)
    assert coord_distance(involution(back), c, table) < 1e-9


@given(st.data())
def test_inverse_undoes_map(data):
    from lorentzgas.geometry import TableConfig
    table = TableConfig.default()
    sys_ = BilliardSystem(table, ThermostattedConstantField(0.03, 0.0))
    c = data.draw(points(table))
    try:
        nxt, rec = billiard_map(c, sys_)
        prev, back = billiard_map_inverse(nxt, sys_)
    except GrazingCollision:
        assume(False)
    assert coord_distance(prev, c, table) < 1e-9
    assert back.s == pytest.approx(-rec.s, abs=1e-12)


def test_record_fields_consistent(forced_system):
    _, rec = billiard_map(CollisionCoord(1, 0.4, -0.5), forced_system)
    assert rec.s == -(rec.log_jac_flow + rec.log_jac_twist)
    assert rec.log_jac_total == rec.log_jac_flow + rec.log_jac_twist
    assert rec.tau > 0


def test_grazing_start_rejected(forced_system):
    with pytest.raises(GrazingCollision):
        billiard_map(CollisionCoord(0, 0.1, math.pi / 2), forced_system)


def test_short_flight_limit_raises(table):
    sys_ = BilliardSystem(table, NoForce(), max_flight_time=1e-3)
    with pytest.raises(HorizonViolation):
        billiard_map(CollisionCoord(0, 0.0, 0.0), sys_)


def test_unforced_map_has_zero_entropy(free_system):
    _, rec = billiard_map(CollisionCoord(1, 0.2, 0.9), free_system)
    assert rec.s == 0.0
