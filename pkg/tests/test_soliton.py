import math

import numpy as np
import pytest

from agent.entropy_agent import w_entropy
from agent.flow_agent import FlowControl, integrate
from agent.kernel_agent import CONJUGATE, oracle_kernel_field
from agent.soliton_agent import (
    SolitonAgent,
    backward_limit_experiment,
    gaussian_reference_residual,
    rescale,
    rescaled_kernel,
    rescaled_weights,
    round_reference_residual,
)
from errors import InvalidParameterError, OutOfDomainError
from geometry import make_flat_torus, make_warped_sphere, round_radius
from models import Scenario

TAUS = [10.0, 100.0, 1000.0]


def test_gaussian_shrinker_has_zero_residual():
    assert gaussian_reference_residual(2) < 1e-10


@pytest.mark.parametrize("n", [2, 3])
def test_round_shrinker_has_zero_residual(n):
    assert round_reference_residual(n) < 1e-10


def test_stretched_round_sphere_residual():
    # Ric = g / 2.2 against g / 2 on a sphere of area 4 pi * 2.2
    expected = 2.0 * (1.0 / 2.2 - 0.5) ** 2
    assert round_reference_residual(2, 1.0, stretch=1.1) == pytest.approx(expected, rel=1e-6)
    assert round_reference_residual(2, 1.0, stretch=1.1) == pytest.approx(0.0041322, rel=1e-4)


def test_rescale_round_sphere(sphere2):
    p = rescale(sphere2, 100.0, 1.0)
    assert p.t == -1.0
    assert round_radius(p) ** 2 == pytest.approx(2.02, rel=1e-10)


def test_rescale_torus(torus):
    p = rescale(torus, 4.0, 1.0, t0=4.0)
    assert p.sides == (10.0, 10.0)


def test_rescale_validation(sphere2):
    with pytest.raises(InvalidParameterError):
        rescale(sphere2, 0.0, 1.0)
    with pytest.raises(InvalidParameterError):
        rescale(sphere2, 10.0, -1.0)
    tr = integrate(make_warped_sphere(2, 1.0, M=16), 0.0, 0.1, FlowControl(snapshots=1))
    with pytest.raises(OutOfDomainError):
        rescale(tr, 10.0, 1.0)


def test_rescaled_kernel_keeps_unit_mass_and_entropy(sphere2):
    tau = 100.0
    kf = oracle_kernel_field(sphere2, 0.0, 0.0, [-200.0, -100.0], CONJUGATE)
    u_k, f_k = rescaled_kernel(sphere2, kf, tau, 1.0)
    weights = rescaled_weights(kf, tau, 1.0)
    assert float(np.sum(u_k * weights)) == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.isfinite(f_k))
    rescaled = w_entropy(rescale(sphere2, tau, 1.0), u_k, 1.0, weights)
    original = w_entropy(sphere2.profile_at(-100.0), kf.at(-100.0), 100.0, kf.measures[kf.index(-100.0)])
    assert rescaled == pytest.approx(original, abs=1e-6)


def test_rescaled_kernel_needs_a_stored_time(sphere2):
    kf = oracle_kernel_field(sphere2, 0.0, 0.0, [-100.0], CONJUGATE)
    with pytest.raises(OutOfDomainError):
        rescaled_kernel(sphere2, kf, 10.0, 1.0)


def test_backward_limit_on_shrinking_sphere(sphere2):
    report = backward_limit_experiment(sphere2, TAUS)
    assert report.verdict == "pass"
    assert report.passed
    assert report.nonflat
    assert len(report.residual_seq) == len(TAUS)
    assert all(b < a for a, b in zip(report.residual_seq, report.residual_seq[1:]))
    assert report.residual_seq[-1] / report.residual_seq[0] < 0.1
    assert all(b <= a + 1e-8 for a, b in zip(report.W_seq, report.W_seq[1:]))
    assert all(gap >= 0 for gap in report.W_gap_seq)
    assert report.W_gap_seq[-1] < report.W_gap_seq[0]
    assert report.W_seq[-1] == pytest.approx(math.log(2.0) - 1.0, abs=1e-2)
    # r_k^2 = 2 (1 + tau) / tau, so tau * |r_k^2 - 2| = 2
    assert report.rate_constant == pytest.approx(2.0, rel=1e-6)
    assert report.limit_max_R == pytest.approx(1.0, rel=1e-2)


def test_backward_limit_flat_control(torus):
    report = backward_limit_experiment(torus, TAUS, control=True)
    assert report.control
    assert not report.nonflat
    assert report.verdict == "fail"
    for W in report.W_seq:
        assert W == pytest.approx(0.0, abs=1e-3)
    assert report.limit_max_R == 0.0
    assert any("non-flat" in note for note in report.notes)


def test_backward_limit_validates_tau_list(sphere2):
    with pytest.raises(InvalidParameterError):
        backward_limit_experiment(sphere2, [100.0, 10.0])
    with pytest.raises(InvalidParameterError):
        backward_limit_experiment(sphere2, [])
    with pytest.raises(InvalidParameterError):
        backward_limit_experiment(sphere2, TAUS, s_ref=0.0)


def test_partial_report_when_trajectory_runs_out():
    # r^2 = 4 - 2(t + 1) vanishes at t = 1, so [-1, 0] is inside the lifespan
    tr = integrate(make_warped_sphere(2, 2.0, M=16, t=-1.0), -1.0, 0.0, FlowControl(snapshots=2))
    assert tr.times[0] == pytest.approx(-1.0)
    assert tr.times[-1] == pytest.approx(0.0)
    # tau = 0.1 needs t in [-0.2, -0.1]; tau = 10 needs t = -20, before the first snapshot
    report = backward_limit_experiment(tr, [0.1, 10.0], dt=1e-2)
    assert len(report.residual_seq) == 1
    assert len(report.W_seq) == 1
    assert report.verdict == "fail"
    assert any(note.startswith("tau=10:") for note in report.notes)
    assert "partial report: some rescaling times failed" in report.notes


def test_agent_uses_scenario_limit(sphere2):
    scenario = Scenario.model_validate({
        "schema": "heatlab/1",
        "name": "limit",
        "model": {"kind": "exact_sphere", "n": 2, "M": 64, "T0": 1.0},
        "limit": {"tau_list": [10.0, 100.0]},
    })
    result = SolitonAgent(threads=2).run(scenario, sphere2)
    assert result["status"] == "success"
    assert result["limit_report"].tau_list == [10.0, 100.0]


def test_flat_torus_sides_are_used_for_control():
    tr = integrate(make_flat_torus(2, [30.0, 30.0], M=64), 0.0, 1.0, FlowControl(snapshots=1))
    report = backward_limit_experiment(tr, [10.0, 100.0], torus_side=30.0)
    assert report.control
    assert report.f_variance_seq[0] == pytest.approx(report.f_variance_seq[1], rel=1e-6)
