import json
from pathlib import Path

import pytest

from agent.flow_agent import FlowControl, exact_sphere_trajectory, integrate
from geometry import make_flat_torus

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def sphere2():
    """Round S^2 shrinking to a point at T0 = 1 (r^2 = 2(1 - t))."""
    return exact_sphere_trajectory(2, 1.0, [-1.0, -0.5, 0.0, 0.5], M=64)


@pytest.fixture
def sphere3():
    return exact_sphere_trajectory(3, 1.0, [-1.0, 0.0], M=64)


@pytest.fixture
def torus():
    """Static flat 2-torus with side 20."""
    return integrate(make_flat_torus(2, [20.0, 20.0], M=64), 0.0, 4.0, FlowControl(snapshots=4))


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture
def write_scenario(tmp_path):
    def _write(payload, name="scenario.json"):
        path = tmp_path / name
        text = payload if isinstance(payload, str) else json.dumps(payload, indent=2)
        path.write_text(text)
        return path
    return _write
