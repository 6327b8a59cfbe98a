import math

import numpy as np
import pytest

from errors import DegenerateMetricError, InvalidParameterError
from geometry import (
    WARPED_SPHERE,
    WarpedProfile,
    ball_volume,
    cell_volumes,
    curvature,
    geodesic_distance,
    gradient_squared,
    laplacian,
    make_flat_torus,
    make_round_sphere,
    make_warped_sphere,
    measure_weights,
    node_distances,
    round_radius,
    scale_lengths,
    total_volume,
    unit_ball_volume,
    unit_sphere_area,
)


def test_unit_sphere_constants():
    assert unit_sphere_area(1) == pytest.approx(2 * math.pi)
    assert unit_sphere_area(2) == pytest.approx(4 * math.pi)
    assert unit_sphere_area(3) == pytest.approx(2 * math.pi ** 2)
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


@pytest.mark.parametrize("n, r", [(2, 2.0), (3, 1.0), (4, 1.5)])
def test_round_sphere_scalar_curvature(n, r):
    p = make_round_sphere(n, r, M=64)
    R = curvature(p).R
    np.testing.assert_allclose(R, n * (n - 1) / r ** 2, rtol=1e-9)


def test_round_sphere_curvature_norm():
    p = make_round_sphere(3, 2.0, M=32)
    field = curvature(p)
    np.testing.assert_allclose(field.rm_norm, 0.25, rtol=1e-9)
    assert field.min_R == pytest.approx(field.max_R)


def test_total_volume_is_exact_for_round_spheres():
    assert total_volume(make_round_sphere(2, 2.0)) == pytest.approx(16 * math.pi, rel=1e-10)
    assert total_volume(make_round_sphere(3, 1.0)) == pytest.approx(2 * math.pi ** 2, rel=1e-10)


def test_cell_volumes_approximate_the_measure():
    p = make_warped_sphere(3, 1.5, M=64, amplitude=0.1, mode=1)
    exact = total_volume(p)
    assert float(np.sum(cell_volumes(p))) == pytest.approx(exact, rel=1e-2)
    assert np.all(cell_volumes(p) > 0)


def test_distances_on_round_sphere():
    p = make_round_sphere(2, 1.5, M=64)
    assert p.length == pytest.approx(math.pi * 1.5, rel=1e-12)
    assert geodesic_distance(p, 0.0, 1.0) == pytest.approx(math.pi * 1.5, rel=1e-12)
    assert geodesic_distance(p, 0.25, 0.75) == pytest.approx(0.5 * math.pi * 1.5, rel=1e-12)
    d = node_distances(p, 1.0)
    assert d[-1] == pytest.approx(0.0, abs=1e-12)
    assert d[0] == pytest.approx(p.length, rel=1e-12)


def test_ball_volume_hemisphere():
    p = make_round_sphere(2, 1.0, M=64)
    assert ball_volume(p, 0.0, math.pi / 2) == pytest.approx(2 * math.pi, rel=1e-8)
    assert ball_volume(p, 1.0, math.pi / 2) == pytest.approx(2 * math.pi, rel=1e-8)
    assert ball_volume(p, 0.0, 10.0) == pytest.approx(4 * math.pi, rel=1e-10)
    assert ball_volume(p, 0.0, 0.0) == 0.0


def test_torus_measure_and_balls():
    p = make_flat_torus(2, [20.0, 20.0], M=64)
    assert total_volume(p) == pytest.approx(400.0)
    assert ball_volume(p, [10.0, 10.0], 3.0) == pytest.approx(9 * math.pi)
    assert geodesic_distance(p, [1.0, 1.0], [19.0, 1.0]) == pytest.approx(2.0)
    assert np.all(curvature(p).R == 0.0)


def test_scale_lengths_rescales_curvature():
    p = make_round_sphere(2, 1.0, M=32)
    q = scale_lengths(p, 2.0)
    assert round_radius(q) == pytest.approx(2.0)
    np.testing.assert_allclose(curvature(q).R, 0.5, rtol=1e-9)


def test_round_radius_rejects_perturbed_profiles():
    assert round_radius(make_warped_sphere(2, 1.0, M=32, amplitude=0.05)) is None
    assert round_radius(make_flat_torus(2, [1.0, 1.0], M=8)) is None


def test_laplacian_of_constants_vanishes():
    p = make_warped_sphere(3, 1.0, M=32, amplitude=0.1, mode=1)
    ones = np.ones(p.grid_shape)
    np.testing.assert_allclose(laplacian(p, ones), 0.0, atol=1e-9)
    np.testing.assert_allclose(gradient_squared(p, ones), 0.0, atol=1e-18)


def test_laplacian_of_first_harmonic():
    # cos(theta) is an eigenfunction with eigenvalue n / r^2
    p = make_round_sphere(2, 1.0, M=64)
    f = np.cos(np.pi * p.x)
    np.testing.assert_allclose(laplacian(p, f), -2.0 * f, atol=1e-9)


def test_measure_weights_integrate_harmonics_to_zero():
    p = make_round_sphere(3, 1.0, M=64)
    weights = measure_weights(p)
    assert float(np.sum(np.cos(np.pi * p.x) * weights)) == pytest.approx(0.0, abs=1e-12)


def test_pole_regularity_is_enforced():
    x = np.linspace(0.0, 1.0, 33)
    b = np.sin(np.pi * x)
    b[0] = b[-1] = 0.0
    a = np.full_like(x, 2.0 * np.pi)
    with pytest.raises(DegenerateMetricError):
        WarpedProfile(2, WARPED_SPHERE, x, a, b)


def test_invalid_profiles_are_rejected():
    with pytest.raises(InvalidParameterError):
        make_round_sphere(2, -1.0)
    with pytest.raises(InvalidParameterError):
        make_round_sphere(2, 1.0, M=8)
    with pytest.raises(InvalidParameterError):
        make_flat_torus(2, [1.0])
    with pytest.raises(InvalidParameterError):
        WarpedProfile(2, "cylinder", np.zeros(3), np.ones(3), np.zeros(3))
