import math
from dataclasses import replace

import numpy as np
import pytest

from esgrid.aggregator import (
    AggregatorParams,
    AggregatorState,
    PIGains,
    es_voltage_setpoints,
    forward_power,
    forward_state,
    noncritical_power,
    operating_region,
    pi_track_step,
    q_bounds_at,
    reactive_from_active,
    setpoint_discriminant,
    setpoint_quadratic_residual,
)
from esgrid.errors import CaseError, DomainError, InfeasibleError, NumericalError

from conftest import REF_AGG
from oracles import setpoint_by_root_finding


def test_nominal_voltage_gives_nominal_power():
    assert noncritical_power(1.0, REF_AGG) == (1.0, 0.2)


def test_reference_values_at_lower_limit():
    p, q = noncritical_power(0.6, REF_AGG)
    assert p == pytest.approx(0.6**1.7, rel=1e-15)
    assert q == pytest.approx(0.2 * 0.6**1.4, rel=1e-15)


def test_reactive_through_active_identity(rng):
    v = rng.uniform(0.6, 1.4, 200)
    p, q = noncritical_power(v, REF_AGG)
    np.testing.assert_allclose(reactive_from_active(p, REF_AGG), q, rtol=1e-12)


def test_voltage_out_of_range():
    with pytest.raises(DomainError):
        noncritical_power(0.5, REF_AGG)


def test_parameter_validation():
    with pytest.raises(CaseError) as info:
        AggregatorParams(p0=0.0, q0=0.1, alpha_p=0.0, alpha_q=1.0, v_nl_limits=(0.0, 1.0))
    assert len(info.value.problems) == 3


def test_nominal_command_needs_no_es_voltage():
    sp = es_voltage_setpoints(REF_AGG.p0, REF_AGG.q0, REF_AGG)
    assert (sp.v_es_d, sp.v_es_q) == (0.0, 0.0)
    assert setpoint_discriminant(1.0, 0.2, REF_AGG) == pytest.approx(1.0, abs=1e-15)


def test_setpoint_matches_root_finding_oracle():
    sp = es_voltage_setpoints(0.8, 0.1, REF_AGG)
    roots = setpoint_by_root_finding(0.8, 0.1, REF_AGG)
    chosen = [r for r in roots if r[2] >= 0]
    assert len(chosen) == 1
    assert sp.v_es_d == pytest.approx(chosen[0][0], abs=1e-8)
    assert sp.v_es_q == pytest.approx(chosen[0][1], abs=1e-8)
    assert not sp.clamped


def test_other_root_is_the_reverse_current_branch():
    roots = setpoint_by_root_finding(0.8, 0.1, REF_AGG)
    assert len(roots) == 2
    assert sum(r[2] < 0 for r in roots) == 1


def test_negative_discriminant_is_infeasible():
    assert setpoint_discriminant(0.5, 10.0, REF_AGG) < 0
    with pytest.raises(InfeasibleError, match="discriminant"):
        es_voltage_setpoints(0.5, 10.0, REF_AGG)


def test_nonpositive_power_rejected():
    with pytest.raises(DomainError):
        es_voltage_setpoints(0.0, 0.1, REF_AGG)


def test_bus_voltage_must_equal_v0():
    with pytest.raises(DomainError):
        es_voltage_setpoints(0.8, 0.1, REF_AGG, v_s_star=1.02)


def test_saturation_reported():
    tight = replace(REF_AGG, v_es_d_limits=(-0.01, 0.01), v_es_q_limits=(-0.01, 0.01))
    sp = es_voltage_setpoints(0.5, 0.1, tight)
    assert sp.clamped
    assert abs(sp.v_es_d) <= 0.01 and abs(sp.v_es_q) <= 0.01


def test_forward_pass_through():
    assert forward_power(0.0, 0.0, 1.0, REF_AGG) == pytest.approx((1.0, 0.2), abs=1e-15)


def test_forward_singular_geometry():
    with pytest.raises(NumericalError, match="zero"):
        forward_power(1.0, 0.0, 1.0, replace(REF_AGG, v_nl_limits=(1e-9, 1.4)))


def test_roundtrip_and_quadratic_root(rng):
    reg = operating_region(REF_AGG)
    for _ in range(200):
        p = rng.uniform(*reg.p_limits)
        q = rng.uniform(*reg.q_limits)
        sp = es_voltage_setpoints(p, q, REF_AGG)
        assert not sp.clamped
        assert forward_power(sp.v_es_d, sp.v_es_q, 1.0, REF_AGG) == pytest.approx((p, q), abs=1e-8)
        assert abs(setpoint_quadratic_residual(sp.v_es_q, p, q, REF_AGG)) < 1e-10


def test_shunt_bookkeeping(rng):
    vd = rng.uniform(-0.3, 0.3, 50)
    vq = rng.uniform(-0.3, 0.3, 50)
    st = forward_state(vd, vq, 1.0, REF_AGG)
    # shunt carries no reactive power and cancels the series active power
    p_series = vd * st.i_d + vq * st.i_q
    np.testing.assert_allclose(st.p_sl, st.p_nl, rtol=0, atol=0)
    np.testing.assert_allclose(st.p_nl + p_series, 1.0 * st.i_d, atol=1e-12)
    np.testing.assert_allclose(st.q_sl, st.q_nl + (vq * st.i_d - vd * st.i_q), atol=1e-12)


def test_reference_region_p_limits():
    reg = operating_region(replace(REF_AGG, v_es_d_limits=(-1, 1), v_es_q_limits=(-1, 1)))
    assert reg.p_limits[0] == pytest.approx(0.6**1.7, rel=1e-15)
    assert reg.p_limits[1] == pytest.approx(1.4**1.7, rel=1e-15)
    assert reg.p_limits == pytest.approx((0.420, 1.772), abs=5e-4)


def test_rectangle_inside_sampled_curves():
    reg = operating_region(REF_AGG)
    assert np.all(reg.q_lower <= reg.q_limits[0] + 1e-12)
    assert np.all(reg.q_upper >= reg.q_limits[1] - 1e-12)
    assert reg.q_limits[0] == pytest.approx(reg.q_lower.max(), abs=1e-6)


def test_curve_bounds_against_brute_force():
    # dense scan of the ES saturation box as an oracle for the boundary curves
    p = 0.9
    d = np.linspace(-0.7, 0.7, 1401)
    vd, vq = np.meshgrid(d, d)
    vnl = np.hypot(1.0 - vd, vq)
    ok = (vnl > 0.6) & (vnl < 1.4)
    st = forward_state(vd[ok], vq[ok], 1.0, REF_AGG)
    near = (np.abs(st.p_sl - p) < 2e-3) & (st.i_d >= 0)
    lo, hi = q_bounds_at(p, 1.0, REF_AGG)
    # the band admits |P - 0.9| < 2e-3, so allow the matching slack in Q
    assert lo <= st.q_sl[near].min() + 2e-3 and hi >= st.q_sl[near].max() - 2e-3
    assert st.q_sl[near].min() == pytest.approx(lo, abs=5e-3)
    assert st.q_sl[near].max() == pytest.approx(hi, abs=5e-3)


def test_shrinking_es_limits_shrinks_q_band():
    widths = []
    for lim in (0.7, 0.5, 0.3, 0.1, 0.02):
        widths.append(q_bounds_at(1.0, 1.0, replace(REF_AGG, v_es_d_limits=(-lim, lim), v_es_q_limits=(-lim, lim))))
    for (lo1, hi1), (lo2, hi2) in zip(widths, widths[1:]):
        assert lo1 <= lo2 + 1e-12 and hi2 <= hi1 + 1e-12
    assert widths[-1][1] - widths[-1][0] < widths[0][1] - widths[0][0]


def test_region_csv():
    text = operating_region(REF_AGG, n_samples=5).to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "p,q_lower,q_upper" and len(lines) == 6


def test_pi_at_setpoint_is_stationary():
    st = AggregatorState.at_rest(REF_AGG, 1.0, 0.1, -0.05)
    out = pi_track_step(st, REF_AGG, 1.0, 0.01)
    assert (out.v_es_d, out.v_es_q) == (0.1, -0.05)
    assert (out.integ_d, out.integ_q) == (0.1, -0.05)


def test_pi_step_response_within_two_percent():
    gains = PIGains()
    st = replace(AggregatorState.at_rest(REF_AGG, 1.0), v_es_d_star=0.2, v_es_q_star=-0.1)
    t, dt = 0.0, 0.005
    while t < 0.1 - 1e-12:
        st = pi_track_step(st, REF_AGG, 1.0, dt, gains)
        t += dt
    assert abs(st.v_es_d - 0.2) <= 0.02 * 0.2
    assert abs(st.v_es_q + 0.1) <= 0.02 * 0.1
    # analytic first-order closed loop
    tau = gains.t_inv / gains.kp
    assert st.v_es_d == pytest.approx(0.2 * (1 - math.exp(-0.1 / tau)), abs=2e-4)  # Euler substeps of 0.5 ms
    assert st.p_sl == pytest.approx(forward_power(st.v_es_d, st.v_es_q, 1.0, REF_AGG)[0])


def test_pi_anti_windup():
    st = replace(AggregatorState.at_rest(REF_AGG, 1.0), v_es_q_star=5.0)
    for _ in range(200):
        st = pi_track_step(st, REF_AGG, 1.0, 0.01)
    assert st.v_es_q == pytest.approx(0.7)
    assert st.integ_q <= 0.7
    st = replace(st, v_es_q_star=0.0)
    for _ in range(40):
        st = pi_track_step(st, REF_AGG, 1.0, 0.01)
    assert abs(st.v_es_q) < 0.01


def test_pi_rejects_bad_dt():
    with pytest.raises(DomainError):
        pi_track_step(AggregatorState.at_rest(REF_AGG, 1.0), REF_AGG, 1.0, 0.0)
