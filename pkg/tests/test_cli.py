import json
import subprocess
import sys

import pytest

from ibrpen.cli import main

from conftest import DATA, read_json

CASE = str(DATA / "twoarea.json")
CONTS = str(DATA / "twoarea_contingencies.json")
PLAN = str(DATA / "twoarea_plan.json")


def _two_contingencies(tmp_path, ids=("F07-L78a", "G5-TRIP")):
    sub = [c for c in read_json(CONTS) if c["id"] in ids]
    p = tmp_path / "two.json"
    p.write_text(json.dumps(sub))
    return str(p)


def test_powerflow_csv(tmp_path, capsys):
    assert main(["powerflow", CASE, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "powerflow.csv").read_text().splitlines()
    assert len(rows) == 1 + 11
    assert "converged" in capsys.readouterr().out
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["status"] == "completed"
    assert [o["path"] for o in manifest["outputs"]] == ["powerflow.csv"]


def test_malformed_exit_2(tmp_path, capsys):
    raw = read_json(CASE)
    raw["buses"][3]["v_setpoint"] = "high"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(raw))
    assert main(["powerflow", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "buses" in err and "v_setpoint" in err


def test_unparseable_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["powerflow", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_infeasible_exit_3(tmp_path):
    raw = read_json(DATA / "twobus.json")
    raw["loads"][0]["p"] = 900.0
    bad = tmp_path / "heavy.json"
    bad.write_text(json.dumps(raw))
    assert main(["powerflow", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert read_json(tmp_path / "o" / "manifest.json")["status"] == "failed"


def test_bad_flag_exit_2(tmp_path):
    assert main(["scan", CASE, CONTS, "--mc", "maybe", "--out", str(tmp_path)]) == 2


def test_empty_contingency_file(tmp_path):
    empty = tmp_path / "none.json"
    empty.write_text("[]")
    assert main(["scan", CASE, str(empty), "--out", str(tmp_path / "o")]) == 0
    prof = read_json(tmp_path / "o" / "profile.json")
    assert prof["contingencies"] == [] and prof["counts"] == []


def test_simulate_record(tmp_path):
    out = tmp_path / "o"
    code = main(["simulate", CASE, "--contingencies", CONTS, "--id", "F07-L78a", "--tstop", "2",
                 "--record", "bus.7.vm", "dev.G1.omega", "--out", str(out)])
    assert code == 0
    lines = (out / "timeseries.csv").read_text().splitlines()
    assert lines[0] == "time_s,bus.7.vm,dev.G1.omega"
    assert len(lines) == 1 + 481
    assert (out / "voltage.svg").exists() and (out / "frequency.svg").exists()
    assert "violations" in read_json(out / "violations.json")


def test_simulate_unknown_channel(tmp_path):
    assert main(["simulate", CASE, "--tstop", "0.1", "--record", "bus.99.vm", "--out", str(tmp_path)]) == 2


def test_simulate_unknown_id(tmp_path):
    assert main(["simulate", CASE, "--contingencies", CONTS, "--id", "NOPE", "--out", str(tmp_path)]) == 2


def test_scan_outputs(tmp_path):
    conts = _two_contingencies(tmp_path)
    out = tmp_path / "o"
    assert main(["scan", CASE, conts, "--tstop", "5", "--out", str(out)]) == 0
    names = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert names == {"manifest.json", "profile.json", "violations.json", "scan_bars.svg",
                     "violations/F07-L78a.json", "violations/G5-TRIP.json"}
    manifest = read_json(out / "manifest.json")
    assert set(manifest["inputs"]) == {"case", "contingencies"}
    assert manifest["config"]["dt"] == pytest.approx(1 / 240)


def test_threshold_tol_wider_than_bracket(tmp_path, caplog):
    conts = _two_contingencies(tmp_path, ("G5-TRIP",))
    out = tmp_path / "o"
    code = main(["threshold", CASE, conts, "--plan", PLAN, "--tol", "0.9", "--tstop", "3",
                 "--out", str(out)])
    assert code == 0
    rep = read_json(out / "threshold.json")
    (entry,) = rep["thresholds"].values()
    assert entry["p_star"] == pytest.approx(175 / 1575)
    assert "tol" in caplog.text


def test_threshold_bad_plan(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"retirement_order": ["G1"], "additions": [{"id": "X", "bus": "6",
                                                                            "max_mw": 900}]}))
    assert main(["threshold", CASE, CONTS, "--plan", str(plan), "--out", str(tmp_path / "o")]) == 2


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ibrpen.cli", "powerflow", CASE, "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and (tmp_path / "powerflow.csv").exists()
