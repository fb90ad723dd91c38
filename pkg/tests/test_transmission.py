from dataclasses import replace

import numpy as np
import pytest
from scipy import signal

from esgrid import transmission as tx
from esgrid.errors import DomainError, NumericalError
from esgrid.grid import bundled_case, case_from_dict


def _gen_load_case():
    return case_from_dict(
        {
            "buses": [{"id": 1, "kind": "generator", "p_nominal": 0.5}, {"id": 2, "kind": "load", "p_nominal": -0.5}],
            "lines": [{"from": 1, "to": 2, "r": 0.0, "x": 0.2}],
        }
    )


@pytest.fixture
def case9_eq():
    case = bundled_case("case9")
    model = tx.build_model(case)
    p_d = np.array([-case.buses[i].p_nominal for i in model.load])
    p_gen = np.array([case.buses[i].p_nominal for i in model.gen])
    state, _ = tx.equilibrium(model, p_gen, p_d)
    return model, state


def test_equilibrium_is_a_fixed_point(case9_eq):
    model, state = case9_eq
    nxt = tx.step_swing(state, model, 0.01)
    np.testing.assert_allclose(nxt.pack(), state.pack(), atol=1e-12)


def test_imbalance_zero_at_equilibrium(case9_eq):
    model, state = case9_eq
    np.testing.assert_allclose(tx.compute_power_imbalance(state, model), 0.0, atol=1e-12)


def test_load_step_shows_in_imbalance_only_at_that_bus(case9_eq):
    model, state = case9_eq
    p_d = state.p_d.copy()
    k = list(model.load).index(6)  # bus 7
    p_d[k] += 0.2
    d = tx.compute_power_imbalance(replace(state, p_d=p_d), model)
    expect = np.zeros(model.n)
    expect[6] = -0.2
    np.testing.assert_allclose(d, expect, atol=1e-12)


def test_imbalance_sum_is_generation_minus_demand(case9_eq, rng):
    model, state = case9_eq
    s = replace(state, delta=state.delta + rng.normal(0, 0.05, model.n), u=rng.normal(0, 0.01, len(model.load)))
    d = tx.compute_power_imbalance(s, model)
    total = tx.mechanical_power(s, model).sum() + s.u.sum() - s.p_d.sum()
    assert d.sum() == pytest.approx(total, abs=1e-13)
    flows = model.b * np.sin(s.delta[:, None] - s.delta[None, :])
    np.testing.assert_allclose(flows, -flows.T, atol=1e-15)


def test_single_machine_initial_slope():
    case = _gen_load_case()
    gen = tx.GeneratorParams(bus=1, M=0.05, D=0.0, t_gov=1e3, t_ch=1e3, t_rh=1e3)
    model = tx.build_model(case, [gen], d_load=1e-3)
    state, _ = tx.equilibrium(model, np.array([0.5]), np.array([0.5]))
    dp = 0.1
    state = replace(state, p_d=state.p_d + dp)
    t_probe = 0.03
    for _ in range(3):
        state = tx.step_swing(state, model, 0.01)
    # the stiff load bus passes the step to the machine within ~1 ms
    slope = state.omega[0] / t_probe
    assert slope == pytest.approx(-dp / gen.M, rel=0.05)


def test_governor_settles_at_reference():
    gen = tx.default_generators()[0]
    st, pm = (0.7, 0.7, 0.7), 0.0
    for _ in range(10):
        st, pm = tx.governor_turbine_step(gen, st, 0.0, 0.0, 0.05, p_ref=0.7)
    assert pm == pytest.approx(0.7, abs=1e-14)


def test_governor_step_response_matches_transfer_function():
    gen = tx.default_generators()[2]
    w = -0.05
    dt, n = 0.01, 3000
    st = (0.0, 0.0, 0.0)
    pm = []
    for _ in range(n):
        st, p = tx.governor_turbine_step(gen, st, w, 0.0, dt)
        pm.append(p)
    pm = np.array(pm)
    t = dt * np.arange(0, n + 1)
    # P_m / (-K w) = 1/(1+sT_G) * (F_HP (1+sT_RH) + 1 - F_HP) / ((1+sT_CH)(1+sT_RH))
    num = np.array([gen.f_hp * gen.t_rh, 1.0])
    den = np.polymul(np.polymul([gen.t_gov, 1.0], [gen.t_ch, 1.0]), [gen.t_rh, 1.0])
    _, ref = signal.step((num, den), T=t)
    ref = ref[1:] * (-gen.droop_gain * w)
    np.testing.assert_allclose(pm, ref, atol=1e-7)
    assert np.all(np.diff(pm) > -1e-15)
    assert pm[-1] == pytest.approx(-gen.droop_gain * w, rel=2e-2)


def test_non_agc_unit_ignores_agc_signal():
    gen = tx.default_generators()[2]
    assert not gen.agc_participation
    a = tx.governor_turbine_step(gen, (0.5, 0.5, 0.5), 0.0, 0.3, 0.1, p_ref=0.5)
    b = tx.governor_turbine_step(gen, (0.5, 0.5, 0.5), 0.0, 0.0, 0.1, p_ref=0.5)
    assert a == b
    agc = tx.default_generators()[0]
    c = tx.governor_turbine_step(agc, (0.5, 0.5, 0.5), 0.0, 0.3, 0.1, p_ref=0.5)
    assert c != b


def test_zero_load_damping_is_singular():
    with pytest.raises(NumericalError, match="singular"):
        tx.build_model(bundled_case("case9"), d_load=0.0)


def test_dt_range_enforced(case9_eq):
    model, state = case9_eq
    with pytest.raises(DomainError):
        tx.step_swing(state, model, 0.1)
    with pytest.raises(DomainError):
        tx.step_swing(state, model, 0.0)


def test_generator_validation():
    with pytest.raises(DomainError, match="M must be"):
        tx.GeneratorParams(bus=1, M=0.0, D=0.0)


def _step_run(model, state, dt, t_end):
    for _ in range(int(round(t_end / dt))):
        state = tx.step_swing(state, model, dt)
    return state


def test_load_step_frequency_bounded_and_droop_settles(case9_eq):
    model, state = case9_eq
    gens = tuple(replace(g, agc_participation=False) for g in model.generators)
    model = replace(model, generators=gens)
    p_d = state.p_d.copy()
    p_d[list(model.load).index(6)] += 0.2
    s = replace(state, p_d=p_d)
    f_min = 60.0
    for _ in range(40):
        s = _step_run(model, s, 0.05, 1.0)
        f_min = min(f_min, tx.frequency(s, model))
    assert 59.5 < f_min < 60.0
    # droop steady state: 0.2 = (sum K_droop + sum D + sum D_l) * |omega|
    K = sum(g.droop_gain + g.D for g in gens) + model.d_load.sum()
    assert tx.coi_speed(s, model) == pytest.approx(-0.2 / K, rel=5e-3)


def test_agc_moves_only_participating_references(case9_eq):
    model, state = case9_eq
    agc = tx.AGC(period=2.0)
    agc.observe(0.0, -0.1)
    assert not agc.due(1.0)
    assert agc.due(2.0)
    new = agc.update(2.0, state, model)
    delta = new.p_ref - state.p_ref
    assert delta[0] > 0 and delta[1] > 0 and delta[2] == 0


def test_numba_and_numpy_swing_agree(case9_eq):
    model, state = case9_eq
    p_d = state.p_d.copy()
    p_d[1] += 0.2
    s = replace(state, p_d=p_d)
    a = tx.step_swing(s, model, 0.05, use_numba=True)
    b = tx.step_swing(s, model, 0.05, use_numba=False)
    np.testing.assert_allclose(a.pack(), b.pack(), rtol=0, atol=1e-13)
