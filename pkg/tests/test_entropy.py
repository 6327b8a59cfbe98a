import math

import numpy as np
import pytest

from agent.entropy_agent import (
    EntropyAgent,
    f_from_u,
    f_lower_bound_check,
    gaussian_trial,
    lambda0,
    log_sobolev_check,
    monotonicity_report,
    shrinker_defect,
    sobolev_check,
    trial_corpus,
    w_entropy,
    w_monotonicity,
)
from agent.kernel_agent import CONJUGATE, FORWARD, image_sum_kernel_torus, oracle_kernel_field
from errors import (
    InvalidDensityError,
    InvalidParameterError,
    InvalidStateError,
    PositivityViolationError,
    UnsupportedDimensionError,
)
from geometry import make_flat_torus, make_round_sphere, measure_weights, total_volume
from models import CheckSpec

S_GRID = [round(1.0 + 0.05 * k, 10) for k in range(21)]


@pytest.fixture
def conjugate_field(sphere2):
    return oracle_kernel_field(sphere2, 0.0, 0.0, [-s for s in S_GRID], CONJUGATE)


def test_f_from_u_inverts_the_density():
    u = np.array([0.1, 0.2, 0.3])
    f = f_from_u(u, 2.0, 3)
    np.testing.assert_allclose((8.0 * math.pi) ** -1.5 * np.exp(-f), u, rtol=1e-12)
    with pytest.raises(PositivityViolationError):
        f_from_u(np.array([0.1, 0.0]), 1.0, 2)
    with pytest.raises(InvalidParameterError):
        f_from_u(u, 0.0, 2)


def test_entropy_of_uniform_density_on_shrinker_sphere():
    # r^2 = 2s: f is constant and W = ln 2 - 1
    p = make_round_sphere(2, math.sqrt(2.0), M=64)
    u = np.full(p.grid_shape, 1.0 / total_volume(p))
    assert w_entropy(p, u, 1.0) == pytest.approx(math.log(2.0) - 1.0, abs=1e-10)
    np.testing.assert_allclose(shrinker_defect(p, u, 1.0), 0.0, atol=1e-12)


def test_entropy_of_euclidean_gaussian_vanishes():
    p = make_flat_torus(2, [20.0, 20.0], M=128)
    u = image_sum_kernel_torus(p, [10.0, 10.0], 1.0)
    assert w_entropy(p, u, 1.0) == pytest.approx(0.0, abs=1e-3)


def test_entropy_rejects_excess_mass():
    p = make_round_sphere(2, 1.0, M=32)
    u = np.full(p.grid_shape, 2.0 / total_volume(p))
    with pytest.raises(InvalidDensityError):
        w_entropy(p, u, 1.0)
    with pytest.raises(InvalidParameterError):
        w_entropy(p, u / 2.0, -1.0)


def test_w_is_monotone_along_the_conjugate_kernel(sphere2, conjugate_field):
    trace = w_monotonicity(sphere2, conjugate_field)
    np.testing.assert_allclose(trace.s_grid, S_GRID)
    assert np.all(np.diff(trace.W_values) <= 1e-8)
    assert np.all(trace.residuals <= 0)
    assert np.all(trace.W_values < 0)
    assert np.all(trace.derivative_mismatch <= 1.0)
    report = monotonicity_report(trace)
    assert report.name == "w_monotonicity"
    assert report.passed


def test_entropy_trace_frame(sphere2, conjugate_field):
    frame = w_monotonicity(sphere2, conjugate_field).to_frame()
    assert list(frame.columns) == ["s", "W", "residual", "dW_numeric", "f_min", "f_max", "f_var"]
    assert len(frame) == len(S_GRID)


def test_f_variance_decreases_along_the_trace(sphere2, conjugate_field):
    # the kernel spreads over a sphere whose radius grows slower than sqrt(s)
    trace = w_monotonicity(sphere2, conjugate_field)
    assert np.all(trace.f_var > 0)
    assert np.all(np.diff(trace.f_var) < 0)
    assert trace.f_var[-1] < trace.f_var[0]


def test_w_monotonicity_needs_conjugate_field(sphere2):
    kf = oracle_kernel_field(sphere2, 0.0, -1.0, [-0.5, 0.0], FORWARD)
    with pytest.raises(InvalidStateError):
        w_monotonicity(sphere2, kf)


def test_f_lower_bound(conjugate_field):
    report = f_lower_bound_check(conjugate_field, (1.0, 2.0))
    assert report.passed
    assert report.samples == len(S_GRID)
    n = 2
    a1 = report.fitted_constants["a1"]
    assert report.fitted_constants["c0"] == pytest.approx(math.log(a1) + 0.5 * n * math.log(4 * math.pi))


@pytest.mark.parametrize("n, r, expected", [(2, 1.0, 2.0), (3, 2.0, 1.5)])
def test_lambda0_of_round_spheres(n, r, expected):
    assert lambda0(make_round_sphere(n, r, M=64)) == pytest.approx(expected, rel=1e-6)


def test_lambda0_of_flat_torus():
    assert lambda0(make_flat_torus(2, [10.0, 10.0], M=32)) == pytest.approx(0.0, abs=1e-8)


def test_lambda0_needs_three_torus_nodes_per_axis():
    with pytest.raises(InvalidParameterError):
        lambda0(make_flat_torus(2, [10.0, 10.0], M=2))
    assert lambda0(make_flat_torus(2, [10.0, 10.0], M=3)) == pytest.approx(0.0, abs=1e-8)


def test_log_sobolev_gaussian_is_sharp():
    p = make_flat_torus(2, [20.0, 20.0], M=128)
    trials = [("gauss", gaussian_trial(p, 1.0))]
    report = log_sobolev_check(p, alpha=0.0, beta=0.0, trials=trials)
    assert abs(report.margin) < 1e-3
    assert report.rows[0]["eps"] == pytest.approx(1.0, rel=1e-2)


def test_log_sobolev_on_round_three_sphere():
    p = make_round_sphere(3, 1.0, M=64)
    report = log_sobolev_check(p, seed=3)
    assert report.passed
    assert report.fitted_constants["beta"] == 0.0
    assert report.fitted_constants["alpha"] >= 0.0
    assert report.samples == len(trial_corpus(p, 3))


def test_sobolev_constant_trial_ratio():
    p = make_round_sphere(3, 1.0, M=64)
    report = sobolev_check(p)
    constant = next(row for row in report.rows if row["trial"] == "constant")
    expected = (2 * math.pi ** 2) ** (-2.0 / 3.0) / 1.5
    assert constant["lhs"] / constant["energy"] == pytest.approx(expected, rel=1e-9)
    assert report.fitted_constants["A"] >= expected
    assert report.fitted_constants["B"] == 0.0
    assert report.passed


def test_sobolev_needs_three_dimensions():
    with pytest.raises(UnsupportedDimensionError):
        sobolev_check(make_round_sphere(2, 1.0, M=32))


def test_trial_corpus_is_reproducible():
    p = make_round_sphere(3, 1.0, M=32)
    first, second = trial_corpus(p, seed=7), trial_corpus(p, seed=7)
    assert [name for name, _ in first] == [name for name, _ in second]
    for (_, a), (_, b) in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_gaussian_trial_is_normalised():
    p = make_flat_torus(2, [20.0, 20.0], M=64)
    v = gaussian_trial(p, 1.0)
    assert float(np.sum(v * v * measure_weights(p))) == pytest.approx(1.0, rel=1e-10)
    with pytest.raises(InvalidParameterError):
        gaussian_trial(make_round_sphere(2, 1.0, M=32), 1.0)


def test_agent_runs_entropy_checks(sphere3):
    agent = EntropyAgent(seed=0)
    report = agent.run_check(CheckSpec(name="lambda0"), sphere3)
    # r^2 = 4 at t = 0 on the unit-extinction 3-sphere
    assert report.fitted_constants["lambda0"] == pytest.approx(1.5, rel=1e-6)
    assert report.passed
    control = agent.run_check(CheckSpec(name="w_monotonicity", control=True,
                                        params={"t0": 0.0, "s_grid": [1.0, 1.25, 1.5]}), sphere3)
    assert control.control
    assert control.passed
