import json

import numpy as np
import pytest

from esgrid.errors import CaseError
from esgrid.grid import BUNDLED_CASES, build_admittance, bundled_case, case_from_dict, load_case, read_case

from conftest import two_bus


def _complex_ybus(case):
    """Independent oracle: Y = A^T diag(y) A + shunts, with A the incidence matrix."""
    n, m = case.n, len(case.lines)
    A = np.zeros((m, n))
    y = np.zeros(m, dtype=complex)
    sh = np.zeros(n, dtype=complex)
    for k, ln in enumerate(case.lines):
        A[k, ln.from_bus - 1], A[k, ln.to_bus - 1] = 1.0, -1.0
        y[k] = 1.0 / complex(ln.r, ln.x)
        sh[ln.from_bus - 1] += 0.5j * ln.b_shunt
        sh[ln.to_bus - 1] += 0.5j * ln.b_shunt
    return A.T @ np.diag(y) @ A + np.diag(sh)


def test_case9_has_three_generators_and_three_loads():
    case = bundled_case("case9")
    assert len(case.ids_of("generator")) == 3
    demand = [b.id for b in case.buses if b.p_nominal < 0]
    assert demand == [5, 7, 9]


def test_single_bus_without_lines_is_rejected():
    with pytest.raises(CaseError, match="no lines"):
        case_from_dict({"buses": [{"id": 1, "kind": "load"}], "lines": []})


def test_duplicate_bus_id_is_named():
    doc = json.loads(bundled_case("case15").to_json())
    doc["buses"][3]["id"] = 3
    with pytest.raises(CaseError, match="duplicate bus id 3"):
        case_from_dict(doc)


def test_invalid_json_reports_position():
    with pytest.raises(CaseError, match="line 1"):
        load_case("{not json", "bad")


def test_every_violation_is_listed():
    doc = {
        "buses": [{"id": 1, "kind": "pcc", "v_limits": [1.1, 1.0]}, {"id": 2}],
        "lines": [{"from": 1, "to": 2, "r": -1, "x": 0.0}],
    }
    with pytest.raises(CaseError) as info:
        case_from_dict(doc)
    assert len(info.value.problems) == 3


def test_disconnected_network_rejected():
    doc = {"buses": [{"id": i} for i in (1, 2, 3)], "lines": [{"from": 1, "to": 2, "x": 0.1}]}
    with pytest.raises(CaseError, match="disconnected"):
        case_from_dict(doc)


def test_two_bus_reactance_only_admittance():
    adm = build_admittance(two_bus(r=0.0, x=0.5))
    np.testing.assert_allclose(adm.B, [[-2.0, 2.0], [2.0, -2.0]], atol=0)
    np.testing.assert_array_equal(adm.G, np.zeros((2, 2)))


def test_series_admittance_formula():
    adm = build_admittance(two_bus(r=0.1, x=0.37))
    d = 0.1**2 + 0.37**2
    g, b = 0.1 / d, 0.37 / d
    assert adm.G[0, 1] == pytest.approx(-g, rel=1e-14)
    assert adm.B[0, 1] == pytest.approx(b, rel=1e-14)
    assert adm.G[0, 0] == pytest.approx(g, rel=1e-14)


def test_shunt_free_b_prime_equals_b():
    adm = build_admittance(two_bus(r=0.1, x=0.37))
    np.testing.assert_array_equal(adm.B_prime, adm.B)


def test_b_prime_drops_shunts():
    adm = build_admittance(two_bus(r=0.1, x=0.37, b_shunt=0.2))
    np.testing.assert_allclose(adm.B_prime.sum(axis=1), 0.0, atol=1e-14)
    np.testing.assert_allclose(np.diag(adm.B - adm.B_prime), [0.1, 0.1], atol=1e-14)


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_admittance_matches_incidence_oracle(name):
    case = bundled_case(name)
    adm = build_admittance(case)
    Y = _complex_ybus(case)
    np.testing.assert_allclose(adm.G, Y.real, atol=1e-12)
    np.testing.assert_allclose(adm.B, Y.imag, atol=1e-12)
    for M in (adm.G, adm.B, adm.B_prime):
        np.testing.assert_array_equal(M, M.T)
    np.testing.assert_allclose(adm.B_prime.sum(axis=1), 0.0, atol=1e-12)
    # sparsity mirrors the line list
    nz = {(i, j) for i, j in zip(*np.nonzero(adm.B)) if i != j}
    lines = {(ln.from_bus - 1, ln.to_bus - 1) for ln in case.lines}
    assert nz == lines | {(j, i) for i, j in lines}


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_serialization_round_trip(name):
    case = bundled_case(name)
    again = load_case(case.to_json(), name)
    assert again.to_dict() == case.to_dict()


def test_read_case_from_file(tmp_path):
    p = tmp_path / "mini.json"
    p.write_text(two_bus().to_json())
    assert read_case(str(p)).n == 2


def test_unknown_bundled_case():
    with pytest.raises(CaseError, match="no bundled case"):
        read_case("case999")


@pytest.mark.parametrize("name", ["feeder7", "case15", "case14"])
def test_subnets_have_one_pcc_and_aggregators(name):
    case = bundled_case(name)
    assert case.pcc == 0
    assert case.aggregators
    assert all(case.buses[b - 1].kind == "aggregator" for b in case.aggregators)
