import math

import numpy as np
import pytest

from agent.flow_agent import (
    FlowControl,
    FlowTrajectory,
    doubling_checks,
    estimate_T0,
    exact_sphere_trajectory,
    integrate,
    kappa_estimate,
    normalize_type_I,
    stable_dt,
    step_ricci_flow,
    type_one_constant,
)
from errors import (
    InterpolationError,
    InvalidParameterError,
    InvalidStateError,
    OutOfDomainError,
    StepRejectedError,
)
from geometry import make_round_sphere, make_warped_sphere, round_radius


def test_exact_trajectory_follows_radius_law(sphere2):
    assert sphere2.radius_squared(0.4) == pytest.approx(1.2)
    assert round_radius(sphere2.profile_at(0.4)) ** 2 == pytest.approx(1.2, rel=1e-12)
    with pytest.raises(OutOfDomainError):
        sphere2.radius_squared(1.0)


def test_numeric_round_sphere_matches_closed_form():
    p = make_round_sphere(2, 2.0, M=32, t=-1.0)
    tr = integrate(p, -1.0, 0.4, FlowControl(snapshots=2))
    last = tr.profiles[-1]
    radius = float(np.mean(last.a)) / math.pi
    assert last.t == pytest.approx(0.4)
    assert radius ** 2 == pytest.approx(1.2, abs=1e-6)
    np.testing.assert_allclose(last.b, radius * np.sin(math.pi * last.x), atol=1e-6)


def test_numeric_extinction_time():
    p = make_round_sphere(2, 2.0, M=32)
    tr = integrate(p, 0.0, 1.5, FlowControl(snapshots=6))
    assert estimate_T0(tr) == pytest.approx(2.0, rel=1e-3)
    assert tr.T0 == pytest.approx(2.0, rel=1e-3)


def test_perturbed_sphere_rounds_out():
    p = make_warped_sphere(3, 2.0, M=32, amplitude=0.05, mode=1)
    tr = integrate(p, 0.0, 0.4, FlowControl(snapshots=4))
    assert len(tr.profiles) == 5
    assert tr.roundness[-1] < tr.roundness[0]
    assert all(np.isfinite(tr.error_estimates))


@pytest.mark.parametrize("n, span, M", [(2, 1.0, 32), (3, 0.5, 32), (3, 0.5, 64),
                                        pytest.param(3, 0.5, 128, marks=pytest.mark.slow)])
def test_round_sphere_halving_span(n, span, M):
    # r^2 = 4 - 2(n-1)t halves from 4 to 2 over the span
    p = make_round_sphere(n, 2.0, M=M)
    tr = integrate(p, 0.0, span, FlowControl(snapshots=2))
    last = tr.profiles[-1]
    radius = float(np.mean(last.a)) / math.pi
    assert radius ** 2 == pytest.approx(2.0, abs=1e-6)
    np.testing.assert_allclose(last.b, radius * np.sin(math.pi * last.x), atol=1e-6)
    assert last.b_s[0] == pytest.approx(1.0, abs=1e-9)
    assert last.b_s[-1] == pytest.approx(-1.0, abs=1e-9)


def test_perturbed_three_sphere_keeps_regular_poles():
    p = make_warped_sphere(3, 2.0, M=64, amplitude=0.05, mode=1)
    tr = integrate(p, 0.0, 0.5, FlowControl(snapshots=2, estimate_error=False))
    for q in tr.profiles:
        assert q.b_s[0] == pytest.approx(1.0, abs=1e-9)
        assert q.b_s[-1] == pytest.approx(-1.0, abs=1e-9)
    assert tr.roundness[-1] < tr.roundness[0]


@pytest.mark.parametrize("n", [2, 3])
def test_integrator_is_fourth_order_in_time(n):
    # one RK4 step has local error ~ h^5, h = (n-1) dt / r^2; the stability
    # bound is lifted so that h is large enough to sit above roundoff
    p = make_round_sphere(n, 1.0, M=16)
    errors = []
    for h in (0.1, 0.05, 0.025):
        dt = h / (n - 1)
        q = step_ricci_flow(p, dt, cfl=1e3)
        exact = math.sqrt(1.0 - 2.0 * (n - 1) * dt)
        errors.append(abs(float(np.mean(q.a)) / math.pi - exact))
    orders = [math.log2(coarse / fine) - 1.0 for coarse, fine in zip(errors, errors[1:])]
    for order in orders:
        assert order == pytest.approx(4.0, abs=0.5)
    assert errors[-1] < 1e-9


def test_oversized_step_is_rejected():
    p = make_round_sphere(2, 1.0, M=32)
    limit = stable_dt(p)
    with pytest.raises(StepRejectedError) as excinfo:
        step_ricci_flow(p, 10 * limit)
    assert excinfo.value.suggested_dt == pytest.approx(limit)


def test_torus_is_static(torus):
    assert torus.static
    assert torus.covers(100.0)
    assert torus.profile_at(2.5).sides == (20.0, 20.0)


def test_trajectory_validation():
    p = make_round_sphere(2, 1.0, M=16)
    with pytest.raises(InvalidParameterError):
        FlowTrajectory([p, p])
    with pytest.raises(InvalidParameterError):
        integrate(p, 1.0, 0.0)


def test_interpolation_outside_span():
    p = make_round_sphere(2, 1.0, M=16)
    tr = integrate(p, 0.0, 0.1, FlowControl(snapshots=1))
    with pytest.raises(InterpolationError):
        tr.profile_at(0.2)
    mid = tr.profile_at(0.05)
    assert mid.t == pytest.approx(0.05)


@pytest.mark.parametrize("n, expected", [(2, 0.5), (3, 0.25)])
def test_type_one_constant_of_shrinking_spheres(n, expected):
    tr = exact_sphere_trajectory(n, 1.0, [-1.0, -0.5, 0.0], M=32)
    assert type_one_constant(tr) == pytest.approx(expected, rel=1e-9)
    assert tr.D0 == pytest.approx(expected, rel=1e-9)


def test_type_one_constant_needs_two_snapshots():
    tr = exact_sphere_trajectory(2, 1.0, [0.0], M=16)
    with pytest.raises(InvalidStateError):
        type_one_constant(tr)


def test_normalize_type_I_freezes_the_radius(sphere2):
    normalized = normalize_type_I(sphere2)
    last = normalized.profiles[-1]
    assert last.t == pytest.approx(-math.log(0.5))
    for p in normalized.profiles:
        assert round_radius(p) ** 2 == pytest.approx(2.0, rel=1e-12)


def test_normalize_type_I_rescales_by_extinction_time():
    tr = exact_sphere_trajectory(3, 2.0, [0.0, 1.0], M=16)
    normalized = normalize_type_I(tr)
    assert [p.t for p in normalized.profiles] == pytest.approx([-math.log(2.0), 0.0])
    for p in normalized.profiles:
        assert round_radius(p) ** 2 == pytest.approx(4.0, rel=1e-12)


def test_normalize_type_I_of_integrated_sphere():
    p = make_round_sphere(2, 2.0, M=32)
    tr = integrate(p, 0.0, 1.5, FlowControl(snapshots=6))
    normalized = normalize_type_I(tr)
    assert len(normalized.profiles) == len(tr.profiles)
    for q in normalized.profiles:
        assert (float(np.mean(q.a)) / math.pi) ** 2 == pytest.approx(2.0, rel=1e-3)


def test_normalize_type_I_needs_finite_extinction_time(torus):
    with pytest.raises(InvalidStateError):
        normalize_type_I(torus)


def test_doubling_exponent_on_round_sphere(sphere2):
    report = doubling_checks(sphere2, [[0.0, 1.0]], [[-10.0, -40.0]])
    assert report.samples == 1
    expected = 0.5 * math.log(22.0 / 82.0) / math.log(0.25)
    assert report.ratio_max == pytest.approx(expected, rel=1e-9)
    assert report.ratio_max == pytest.approx(0.4745, abs=1e-4)
    assert report.fitted_constants["D0"] == pytest.approx(0.5)
    assert report.passed


def test_doubling_times_must_be_ordered(sphere2):
    with pytest.raises(InvalidParameterError):
        doubling_checks(sphere2, [[0.0, 1.0]], [[-40.0, -10.0]])


def test_kappa_on_flat_torus(torus):
    assert kappa_estimate(torus, [1.0, 2.0]) == pytest.approx(math.pi)
    assert torus.kappa == pytest.approx(math.pi)


def test_kappa_rejects_bad_scales(torus):
    with pytest.raises(InvalidParameterError):
        kappa_estimate(torus, [-1.0])
