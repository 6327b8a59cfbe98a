import json

import pytest

from main import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, load_scenario, main
from errors import ScenarioError
from models import CheckReport
from store_manager import ArtifactStoreManager

BASE = {
    "schema": "heatlab/1",
    "name": "tiny sphere",
    "model": {"kind": "exact_sphere", "n": 2, "M": 32, "T0": 1.0},
    "flow": {"t_start": -1.0, "t_end": 0.0, "snapshots": 2},
}


def _stderr_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_malformed_scenario_exits_with_usage_error(write_scenario, capsys):
    path = write_scenario('{\n  "schema": "heatlab/1",\n  "name": \n}')
    assert main(["run", str(path)]) == EXIT_USAGE
    error = _stderr_error(capsys)
    assert error["code"] == "scenario-error"
    assert error["line"] == 4


def test_unknown_check_is_located(write_scenario, capsys):
    payload = dict(BASE, checks=[{"name": "no_such_check"}])
    path = write_scenario(payload)
    assert main(["check", "--scenario", str(path)]) == EXIT_USAGE
    error = _stderr_error(capsys)
    assert "no_such_check" in error["message"] or "unknown check" in error["message"]
    assert error["line"] > 1


def test_wrong_schema_version(write_scenario):
    path = write_scenario(dict(BASE, schema="heatlab/0"))
    with pytest.raises(ScenarioError):
        load_scenario(str(path))


def test_missing_scenario_argument():
    assert main(["run"]) == EXIT_USAGE


def test_flow_verb_writes_trajectory(write_scenario, tmp_path):
    path = write_scenario(BASE)
    out = tmp_path / "run"
    assert main(["flow", str(path), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "trajectory" / "trajectory.json").read_text())
    assert manifest["times"] == [-1.0, -0.5, 0.0]
    audit = json.loads((out / "audit_log.json").read_text())
    assert audit["final_status"] == "success"
    assert audit["stages"]["kernel_stage"]["status"] == "skipped"


def test_runs_are_reproducible(write_scenario, tmp_path):
    path = write_scenario(BASE)
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["flow", str(path), "--out", str(first)]) == EXIT_OK
    assert main(["flow", str(path), "--out", str(second)]) == EXIT_OK
    for relative in ("audit_log.json", "trajectory/trajectory.json", "trajectory/profile_0001.csv"):
        assert (first / relative).read_bytes() == (second / relative).read_bytes()


def test_failing_check_exits_with_one(write_scenario, tmp_path):
    payload = dict(BASE, checks=[{"name": "lambda0", "caps": {}}, {"name": "sobolev"}])
    path = write_scenario(payload)
    out = tmp_path / "run"
    # sobolev needs n >= 3, so the n = 2 run reports a failed check
    assert main(["check", str(path), "--out", str(out)]) == EXIT_CHECK_FAILED
    sobolev = json.loads((out / "reports" / "sobolev.json").read_text())
    assert sobolev["pass"] is False
    assert any("unsupported-dimension" in note for note in sobolev["notes"])


def test_report_on_empty_directory(tmp_path):
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_CHECK_FAILED


def test_report_lists_failures_first(tmp_path, capsys):
    store = ArtifactStoreManager(str(tmp_path))
    store.save_report(CheckReport(name="mass_bracket", passed=True, margin=0.5))
    store.save_report(CheckReport(name="on_diag_upper", passed=False, margin=-2.0))
    assert main(["report", "--out", str(tmp_path), "--format", "json"]) == EXIT_OK
    rows = json.loads((tmp_path / "summary.json").read_text())
    assert [row["name"] for row in rows] == ["on_diag_upper", "mass_bracket"]
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["name", "pass"]
    assert lines[1].startswith("on_diag_upper,False")


@pytest.mark.slow
def test_backward_limit_scenario(scenario_dir, tmp_path):
    out = tmp_path / "limit"
    assert main(["run", str(scenario_dir / "sphere_backward_limit.json"), "--out", str(out)]) == EXIT_OK
    limit = json.loads((out / "limit_report.json").read_text())
    assert limit["verdict"] == "pass"
    assert limit["nonflat"] is True


@pytest.mark.slow
def test_torus_control_scenario(scenario_dir, tmp_path):
    out = tmp_path / "torus"
    assert main(["run", str(scenario_dir / "torus_control.json"), "--out", str(out)]) == EXIT_OK
    limit = json.loads((out / "limit_report.json").read_text())
    assert limit["verdict"] == "fail"
    assert limit["nonflat"] is False
    assert limit["control"] is True


@pytest.mark.slow
def test_warped_three_sphere_flow_scenario(scenario_dir, tmp_path):
    out = tmp_path / "flow"
    assert main(["run", str(scenario_dir / "sphere_flow.json"), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "trajectory" / "trajectory.json").read_text())
    assert len(manifest["profiles"]) == 9
    report = json.loads((out / "reports" / "lambda0.json").read_text())
    assert report["pass"] is True
