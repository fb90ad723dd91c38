import numpy as np
import pytest

from esgrid.aggregator import AggregatorParams
from esgrid.grid import case_from_dict

SUBNETS = ("feeder7", "case15", "case14")

# reference aggregator used in the algebra examples
REF_AGG = AggregatorParams(p0=1.0, q0=0.2, alpha_p=1.7, alpha_q=1.4)


def two_bus(r=0.0, x=0.5, p2=-0.1, q2=0.0, b_shunt=0.0, kinds=("pcc", "load")):
    return case_from_dict(
        {
            "buses": [
                {"id": 1, "kind": kinds[0], "v_limits": [1.0, 1.0], "theta_limits_deg": [0, 0]},
                {"id": 2, "kind": kinds[1], "p_nominal": p2, "q_nominal": q2},
            ],
            "lines": [{"from": 1, "to": 2, "r": r, "x": x, "b_shunt": b_shunt}],
        },
        "two_bus",
    )


def symmetric_feeder(h=100.0, g=40.0):
    """PCC feeding two identical aggregator buses over identical lines."""
    agg = {"p0": 0.01, "q0": 0.002, "alpha_p": 1.5, "alpha_q": 1.5, "h": h, "g": g}
    return case_from_dict(
        {
            "buses": [
                {"id": 1, "kind": "pcc", "v_limits": [1.0, 1.0], "theta_limits_deg": [0, 0]},
                {"id": 2, "kind": "aggregator", "p_nominal": -0.1, "q_nominal": -0.02},
                {"id": 3, "kind": "aggregator", "p_nominal": -0.1, "q_nominal": -0.02},
            ],
            "lines": [{"from": 1, "to": 2, "r": 0.1, "x": 0.37}, {"from": 1, "to": 3, "r": 0.1, "x": 0.37}],
            "aggregators": [dict(agg, bus=2), dict(agg, bus=3)],
        },
        "sym3",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# optimisation problems

CONTINGENCY_U = {"feeder7": 0.015, "case15": 0.02, "case14": 0.025}


def subnet_problem(name, u_bar, event=None):
    """Problem for a bundled subnet; ``event`` = (bus, dp) adds critical load."""
    from esgrid.aggregator import operating_region
    from esgrid.distopt import build_problem
    from esgrid.grid import bundled_case
    from esgrid.powerflow import fit_loss_model

    case = bundled_case(name)
    loss = fit_loss_model(case)
    if event is not None:
        bus, dp = event
        p = case.p_injection().copy()
        p[bus - 1] -= dp
        case = case.with_injections(p, case.q_injection())
    regions = {b: operating_region(a) for b, a in case.aggregators.items()}
    return build_problem(case, u_bar, loss, regions)


def contingency_problem(name):
    event = (7, 0.2) if name == "case15" else None
    return subnet_problem(name, CONTINGENCY_U[name], event)
