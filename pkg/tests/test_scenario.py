import json
import re

import numpy as np
import pytest

from esgrid import cli
from esgrid.errors import CaseError, NumericalError
from esgrid.grid import bundled_case
from esgrid.scenario import (
    ScenarioConfig,
    Simulation,
    TimeSeriesLog,
    compare_costs,
    cost_entry,
    run_scenario,
    write_outputs,
)

SHORT_EVENT = {"t_end": 1.0, "events": [{"time": 0.2, "network": "case15", "bus": 7, "dp": 0.2}]}


@pytest.fixture(scope="module")
def short_run():
    return run_scenario(ScenarioConfig.from_dict(SHORT_EVENT))


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize(
    "doc, msg",
    [
        ({"bogus": 1}, "unknown key"),
        ({"dt": -0.01}, "dt must be positive"),
        ({"t_end": -1.0}, "t_end must exceed"),
        ({"broadcast_period": 0.155}, "multiple of dt"),
        ({"events": [{"time": 99.0, "network": "case15", "bus": 7, "dp": 0.1}]}, "outside"),
        ({"events": [{"time": 1.0, "network": "nowhere", "bus": 7, "dp": 0.1}]}, "not part of the scenario"),
        ({"events": [{"time": 1.0, "network": "case15"}]}, "events\\[0\\]"),
        ({"optimizer": {"mode": "fast"}}, "optimizer.mode"),
        ({"dt": "small"}, "dt must be a number"),
    ],
)
def test_invalid_config_rejected(doc, msg):
    with pytest.raises(CaseError) as info:
        ScenarioConfig.from_dict(doc)
    assert any(re.search(msg, p) for p in info.value.problems)


def test_invalid_json_names_position():
    with pytest.raises(CaseError, match="line 1"):
        ScenarioConfig.from_json("{not json")


def test_defaults_merge_nested_keys():
    cfg = ScenarioConfig.from_dict({"controller": {"k_i": 2.0}})
    assert cfg.controller["k_i"] == 2.0
    assert cfg.controller["k_p"] == 0.02


def test_config_echo_roundtrip():
    cfg = ScenarioConfig.from_dict(SHORT_EVENT)
    again = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_subnet_on_generator_bus_rejected():
    with pytest.raises(CaseError, match="not a load bus"):
        Simulation(ScenarioConfig.from_dict({"subnets": {"1": "feeder7"}}))


# ---------------------------------------------------------------------------
# engine


def test_no_event_run_stays_at_rest():
    res = run_scenario(ScenarioConfig.from_dict({"t_end": 1.0}))
    log = res.log
    np.testing.assert_allclose(log.column("f_hz"), 60.0, atol=1e-9)
    assert np.all(log.column("phi") == 1)
    for c in log.columns:
        if c.startswith("u_bar_") or c.startswith("p_real_"):
            np.testing.assert_allclose(log.column(c), 0.0, atol=1e-9)
    for entry in res.costs.values():
        assert entry["distributed"] == 0.0 and entry["proportional"] == 0.0
    assert res.switch_events == []


def test_log_column_order(short_run):
    cols = short_run.log.columns
    assert cols[:4] == ["t", "f_hz", "phi", "since_broadcast"]
    assert cols[4:10] == [f"u_bar_{b}" for b in range(4, 10)]
    assert cols[10:16] == [f"u_{b}" for b in range(4, 10)]
    k = 16
    for name in ("feeder7", "case15", "case14"):
        case = bundled_case(name)
        block = [f"p_real_{name}", f"p_pcc_{name}"]
        block += [f"v_{name}_{b.id}" for b in case.buses]
        block += [f"v_nl_{name}_{b}" for b in sorted(case.aggregators)]
        block += [f"cost_do_{name}", f"cost_pa_{name}"]
        assert cols[k : k + len(block)] == block
        k += len(block)
    assert k == len(cols)


def test_log_time_grid(short_run):
    t = short_run.log.t
    assert len(t) == 100
    np.testing.assert_allclose(np.diff(t), 0.01, atol=1e-12)


def test_event_triggers_frm_and_response(short_run):
    log = short_run.log
    assert short_run.switch_events[0].kind == "enter_frm"
    assert short_run.switch_events[0].time >= 0.2
    assert log.column("u_bar_7")[-1] > 0
    assert log.column("p_real_case15")[-1] > 0
    for name, entry in short_run.costs.items():
        assert entry["distributed"] < entry["proportional"], name


def test_costs_are_monotone(short_run):
    for c in short_run.log.columns:
        if c.startswith("cost_"):
            assert np.all(np.diff(short_run.log.column(c)) >= 0)


def test_log_rejects_non_increasing_time():
    log = TimeSeriesLog(["t", "x"])
    log.append([0.0, 1.0])
    with pytest.raises(NumericalError):
        log.append([0.0, 2.0])


def test_csv_uses_nine_significant_digits(short_run):
    text = short_run.log.to_csv()
    body = text.splitlines()[1:]
    for line in body[:50]:
        for field in line.split(","):
            mantissa = re.sub(r"e[-+]\d+$", "", field).lstrip("-").replace(".", "").lstrip("0")
            assert len(mantissa) <= 9
    back = TimeSeriesLog.from_csv(text)
    assert back.columns == short_run.log.columns
    np.testing.assert_allclose(np.array(back.rows), np.array(short_run.log.rows), rtol=1e-8, atol=1e-300)


def test_compare_costs_reads_log(short_run):
    from_log = compare_costs(TimeSeriesLog.from_csv(short_run.log.to_csv()))
    for name, entry in short_run.costs.items():
        assert from_log[name]["distributed"] == pytest.approx(entry["distributed"], rel=1e-8)
        assert from_log[name]["proportional"] == pytest.approx(entry["proportional"], rel=1e-8)


def test_cost_entry():
    e = cost_entry(1.0, 4.0)
    assert e == {"distributed": 1.0, "proportional": 4.0, "difference": 3.0, "relative": 0.75}
    assert cost_entry(0.0, 0.0)["relative"] == 0.0


# ---------------------------------------------------------------------------
# command line


def _write(tmp_path, doc, name="scenario.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_cli_run_writes_outputs(tmp_path, short_run, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", _write(tmp_path, SHORT_EVENT), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["config-echo.json", "costs.json", "log.csv"]
    assert (out / "log.csv").read_text() == short_run.log.to_csv()
    costs = json.loads((out / "costs.json").read_text())
    assert set(costs) == {"feeder7", "case15", "case14"}
    echo = json.loads((out / "config-echo.json").read_text())
    assert echo["events"][0]["dp"] == 0.2 and echo["dt"] == 0.01
    capsys.readouterr()

    assert cli.main(["compare-costs", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "subnet,distributed,proportional,difference,relative"
    rows = {r.split(",")[0]: [float(v) for v in r.split(",")[1:]] for r in lines[1:]}
    assert rows["case15"][0] == pytest.approx(costs["case15"]["distributed"], rel=1e-8)


def test_write_outputs_creates_directory(tmp_path, short_run):
    out = tmp_path / "a" / "b"
    write_outputs(short_run, out)
    assert (out / "log.csv").exists()


def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["run", _write(tmp_path, {"dt": 0}), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["run", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["compare-costs", str(tmp_path / "nothing")]) == 2
    assert cli.main(["region", "feeder7", "1"]) == 2
    assert cli.main(["pf", "nocase"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_numerical_failure_exits_3(tmp_path, capsys):
    doc = {"t_end": 0.3, "events": [{"time": 0.1, "network": "case15", "bus": 7, "dp": 20.0}]}
    assert cli.main(["run", _write(tmp_path, doc), "--out", str(tmp_path / "o")]) == 3
    assert "numerical failure" in capsys.readouterr().err


@pytest.mark.parametrize("flag", ["--dlpf", "--ac"])
def test_cli_pf(flag, capsys):
    assert cli.main(["pf", "case14", flag]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "bus,v,theta_deg,p,q"
    assert len(lines) == 15
    v = [float(r.split(",")[1]) for r in lines[1:]]
    assert v[0] == pytest.approx(1.05) and all(0.9 < x < 1.1 for x in v)


def test_cli_region_and_fit_loss(capsys):
    assert cli.main(["region", "feeder7", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) > 10
    assert cli.main(["fit-loss", "feeder7"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert 0 < fit["d_l"] < 1 and fit["max_residual"] < 1e-3
