import json

import numpy as np
import pytest

from agent.entropy_agent import w_monotonicity
from agent.kernel_agent import CONJUGATE, FORWARD, oracle_kernel_field
from errors import InvalidParameterError
from geometry import make_flat_torus, make_warped_sphere
from models import CheckReport, LimitReport
from store_manager import KERNEL_COLUMNS, PROFILE_COLUMNS, ArtifactStoreManager


@pytest.fixture
def store(tmp_path):
    return ArtifactStoreManager(str(tmp_path / "out"))


def test_profile_round_trip_is_byte_stable(store, tmp_path):
    p = make_warped_sphere(3, 1.3, M=32, t=0.25, amplitude=0.05, mode=1)
    first = store.save_profile(p, tmp_path / "a.csv")
    assert first.read_text().splitlines()[0] == ",".join(PROFILE_COLUMNS)
    loaded = store.load_profile(first, n=3)
    np.testing.assert_array_equal(loaded.a, p.a)
    np.testing.assert_array_equal(loaded.b, p.b)
    assert loaded.t == 0.25
    second = store.save_profile(loaded, tmp_path / "b.csv")
    assert first.read_bytes() == second.read_bytes()


def test_torus_profile_round_trip(store, tmp_path):
    p = make_flat_torus(2, [20.0, 30.0], M=16, t=1.5)
    path = store.save_profile(p, tmp_path / "torus.csv")
    loaded = store.load_profile(path, M=16)
    assert loaded.sides == (20.0, 30.0)
    assert loaded.t == 1.5
    with pytest.raises(InvalidParameterError):
        store.load_profile(path)


def test_profile_header_is_checked(store, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,y,a,b\n0,0,1,0\n")
    with pytest.raises(InvalidParameterError):
        store.load_profile(path, n=2)


def test_trajectory_round_trip(store, sphere2):
    folder = store.save_trajectory(sphere2)
    manifest = json.loads((folder / "trajectory.json").read_text())
    assert manifest["n"] == 2
    assert manifest["exact"] is True
    assert manifest["times"] == [-1.0, -0.5, 0.0, 0.5]
    assert manifest["profiles"][0] == "profile_0000.csv"
    loaded = store.load_trajectory()
    assert loaded.exact
    assert loaded.T0 == 1.0
    np.testing.assert_array_equal(loaded.times, sphere2.times)


def test_static_trajectory_manifest(store, torus):
    store.save_trajectory(torus)
    loaded = store.load_trajectory()
    assert loaded.static
    assert loaded.T0 == float("inf")
    assert loaded.profiles[0].sides == (20.0, 20.0)


def test_kernel_csv_columns(store, sphere2):
    kf = oracle_kernel_field(sphere2, 0.0, -1.0, [-0.5, 0.0], FORWARD)
    folder = store.save_kernel(kf)
    lines = (folder / "kernel.csv").read_text().splitlines()
    assert lines[0] == ",".join(KERNEL_COLUMNS)
    assert len(lines) == 1 + 2 * 65
    manifest = json.loads((folder / "kernel.json").read_text())
    assert manifest["direction"] == "forward"
    assert manifest["l"] == -1.0
    assert manifest["solver"] == {"scheme": "oracle"}


def test_report_round_trip(store):
    report = CheckReport(name="on_diag_upper", samples=3, ratio_min=0.1, ratio_max=0.2,
                         fitted_constants={"B": 0.2, "bad": float("inf")}, passed=True, margin=99.8,
                         rows=[{"tau": 1.0, "G": 0.2}])
    path = store.save_report(report)
    payload = json.loads(path.read_text())
    assert payload["pass"] is True
    assert payload["fitted_constants"]["bad"] is None
    assert "rows" not in payload
    assert (path.parent / "on_diag_upper_samples.csv").exists()
    assert store.load_report(path).model_dump(by_alias=True) == payload


def test_summary_lists_failures_first(store):
    store.save_report(CheckReport(name="alpha", passed=True, margin=1.0))
    store.save_report(CheckReport(name="beta", passed=False, margin=-1.0))
    store.save_report(CheckReport(name="gamma", passed=True, margin=2.0, fitted_constants={"c": 3.0}))
    table = store.summary_table()
    assert list(table["name"]) == ["beta", "alpha", "gamma"]
    assert list(table["pass"]) == [False, True, True]
    assert table.loc[2, "c"] == 3.0


def test_summary_of_empty_store(store):
    assert store.summary_table().empty
    assert store.list_reports() == []


def test_limit_report_round_trip(store):
    report = LimitReport(tau_list=[10.0, 100.0], residual_seq=[0.1, 0.01], W_seq=[-0.3, -0.31],
                         rate_constant=float("nan"), nonflat=True, verdict="pass")
    store.save_limit_report(report)
    loaded = store.load_limit_report()
    assert loaded.passed
    assert loaded.rate_constant is None
    assert loaded.residual_seq == [0.1, 0.01]


def test_entropy_trace_csv(store, sphere2):
    kf = oracle_kernel_field(sphere2, 0.0, 0.0, [-1.5, -1.25, -1.0], CONJUGATE)
    path = store.save_entropy_trace(w_monotonicity(sphere2, kf))
    lines = path.read_text().splitlines()
    assert lines[0] == "s,W,residual,dW_numeric,f_min,f_max,f_var"
    assert len(lines) == 4
