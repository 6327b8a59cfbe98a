"""Reduced model metrics: rotationally symmetric warped spheres and flat tori.

A warped sphere is g = a(x)^2 dx^2 + b(x)^2 g_{S^{n-1}} on x in [0, 1] with
poles at x = 0 and x = 1. A flat torus is the product of circles with the given
side lengths; it stands in for Euclidean space when data is compactly supported.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import gamma

from errors import DegenerateMetricError, InvalidParameterError
from utils import (
    EVEN,
    ODD,
    parity_antiderivative,
    parity_derivative,
    parity_quadrature_weights,
    periodic_derivative,
)

logger = logging.getLogger(__name__)

WARPED_SPHERE = "warped_sphere"
FLAT_TORUS = "flat_torus"
KINDS = (WARPED_SPHERE, FLAT_TORUS)

POLE_TOLERANCE = 1e-3
MIN_SPHERE_NODES = 16


def unit_sphere_area(k: int) -> float:
    """Area of the unit k-sphere."""
    return 2.0 * math.pi ** ((k + 1) / 2.0) / gamma((k + 1) / 2.0)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2.0) / gamma(n / 2.0 + 1.0)


@dataclass(frozen=True, eq=False)
class WarpedProfile:
    n: int
    kind: str
    x: np.ndarray
    a: np.ndarray
    b: np.ndarray
    t: float = 0.0
    sides: Tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown model kind '{self.kind}'")
        if self.kind == FLAT_TORUS:
            if self.n < 1 or len(self.sides) != self.n:
                raise InvalidParameterError("torus needs one side length per dimension")
            if any(side <= 0 for side in self.sides):
                raise InvalidParameterError("torus side lengths must be positive")
            return
        if self.n < 2:
            raise InvalidParameterError("warped spheres need n >= 2")
        if self.a.shape != self.x.shape or self.b.shape != self.x.shape:
            raise InvalidParameterError("a, b and x must share the grid")
        if not np.all(np.isfinite(self.a)) or not np.all(np.isfinite(self.b)):
            raise DegenerateMetricError("non-finite metric coefficients")
        if np.any(self.a <= 0):
            raise DegenerateMetricError("radial coefficient a must be positive")
        if np.any(self.b[1:-1] <= 0):
            raise DegenerateMetricError("warping radius b vanished at an interior node")
        scale = float(np.max(self.b))
        if abs(self.b[0]) > 1e-12 * scale or abs(self.b[-1]) > 1e-12 * scale:
            raise DegenerateMetricError("warping radius must vanish at both poles")
        b_s = self.b_s
        if abs(b_s[0] - 1.0) > POLE_TOLERANCE or abs(b_s[-1] + 1.0) > POLE_TOLERANCE:
            raise DegenerateMetricError(
                f"pole regularity violated: b_s(0)={b_s[0]:.6g}, b_s(1)={b_s[-1]:.6g}"
            )

    @property
    def M(self) -> int:
        return len(self.x) - 1

    @property
    def dx(self) -> float:
        return 1.0 / self.M

    @property
    def is_torus(self) -> bool:
        return self.kind == FLAT_TORUS

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        if self.is_torus:
            return (self.M,) * self.n
        return (self.M + 1,)

    def axis_spacing(self, axis: int) -> float:
        return self.sides[axis] / self.M

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.M) * self.axis_spacing(axis)

    @cached_property
    def b_x(self) -> np.ndarray:
        return parity_derivative(self.b, self.dx, ODD)

    @cached_property
    def b_s(self) -> np.ndarray:
        return self.b_x / self.a

    @cached_property
    def b_ss(self) -> np.ndarray:
        return parity_derivative(self.b_s, self.dx, EVEN) / self.a

    @cached_property
    def b_ss_over_b(self) -> np.ndarray:
        """b_ss / b with the pole limits (d b_ss/dx) / (d b/dx)."""
        ratio = np.empty_like(self.b)
        ratio[1:-1] = self.b_ss[1:-1] / self.b[1:-1]
        slope = parity_derivative(self.b_ss, self.dx, ODD)
        ratio[0] = slope[0] / self.b_x[0]
        ratio[-1] = slope[-1] / self.b_x[-1]
        return ratio

    @cached_property
    def arclength(self) -> np.ndarray:
        """Arclength from the pole x = 0 at every node."""
        if self.is_torus:
            return self.axis_nodes(0)
        return parity_antiderivative(self.a, EVEN, self.x)

    @property
    def length(self) -> float:
        if self.is_torus:
            return float(self.sides[0])
        return float(self.arclength[-1])

    def with_time(self, t: float) -> "WarpedProfile":
        return WarpedProfile(self.n, self.kind, self.x, self.a, self.b, t, self.sides)


@dataclass(frozen=True, eq=False)
class CurvatureField:
    R: np.ndarray
    ric_rad: np.ndarray
    ric_sph: np.ndarray
    rm_norm: np.ndarray

    @property
    def min_R(self) -> float:
        return float(np.min(self.R))

    @property
    def max_R(self) -> float:
        return float(np.max(self.R))


def make_round_sphere(n: int, r: float, M: int = 64, t: float = 0.0) -> WarpedProfile:
    return make_warped_sphere(n, r, M, t)


def make_warped_sphere(n: int, r: float, M: int = 64, t: float = 0.0,
                       amplitude: float = 0.0, mode: int = 1) -> WarpedProfile:
    """Sphere of radius r, optionally perturbed by (1 + amplitude cos(2 pi mode x)).

    The same factor multiplies a and b, so b_s = +-1 at the poles for every amplitude.
    """
    if n < 2:
        raise InvalidParameterError(f"dimension must be >= 2, got {n}")
    if r <= 0:
        raise InvalidParameterError(f"radius must be positive, got {r}")
    if M < MIN_SPHERE_NODES:
        raise InvalidParameterError(f"grid needs at least {MIN_SPHERE_NODES} cells, got {M}")
    if abs(amplitude) >= 1:
        raise InvalidParameterError("perturbation amplitude must be below 1")
    x = np.linspace(0.0, 1.0, M + 1)
    bump = 1.0 + amplitude * np.cos(2.0 * np.pi * mode * x)
    a = np.pi * r * bump
    b = r * np.sin(np.pi * x) * bump
    b[0] = 0.0
    b[-1] = 0.0
    return WarpedProfile(n, WARPED_SPHERE, x, a, b, float(t))


def make_flat_torus(n: int, sides: Sequence[float], M: int = 64, t: float = 0.0) -> WarpedProfile:
    if n < 1:
        raise InvalidParameterError(f"dimension must be >= 1, got {n}")
    sides = tuple(float(side) for side in sides)
    if len(sides) != n:
        raise InvalidParameterError(f"expected {n} side lengths, got {len(sides)}")
    if any(side <= 0 for side in sides):
        raise InvalidParameterError(f"side lengths must be positive, got {sides}")
    if M < 2:
        raise InvalidParameterError("torus grid needs at least 2 nodes per axis")
    x = np.linspace(0.0, 1.0, M + 1)
    return WarpedProfile(n, FLAT_TORUS, x, np.ones_like(x), np.zeros_like(x), float(t), sides)


def scale_lengths(p: WarpedProfile, factor: float, t: Optional[float] = None) -> WarpedProfile:
    """Profile of the metric factor^2 g (lengths multiplied by factor)."""
    if factor <= 0:
        raise InvalidParameterError("length factor must be positive")
    t = p.t if t is None else float(t)
    if p.is_torus:
        return make_flat_torus(p.n, [side * factor for side in p.sides], p.M, t)
    return WarpedProfile(p.n, p.kind, p.x, p.a * factor, p.b * factor, t)


def blend_profiles(p0: WarpedProfile, p1: WarpedProfile, t: float) -> WarpedProfile:
    """Linear interpolation in time of the metric coefficients."""
    if p1.t == p0.t:
        return p0.with_time(t)
    w = (t - p0.t) / (p1.t - p0.t)
    if p0.is_torus:
        sides = [(1 - w) * s0 + w * s1 for s0, s1 in zip(p0.sides, p1.sides)]
        return make_flat_torus(p0.n, sides, p0.M, t)
    return WarpedProfile(p0.n, p0.kind, p0.x, (1 - w) * p0.a + w * p1.a,
                         (1 - w) * p0.b + w * p1.b, t)


def round_radius(p: WarpedProfile, tol: float = 1e-9) -> Optional[float]:
    """Radius when the profile is a round sphere, else None."""
    if p.is_torus:
        return None
    r = float(np.mean(p.a)) / np.pi
    if np.max(np.abs(p.a - np.pi * r)) > tol * np.pi * r:
        return None
    if np.max(np.abs(p.b - r * np.sin(np.pi * p.x))) > tol * r:
        return None
    return r


def sectional_curvatures(p: WarpedProfile) -> Tuple[np.ndarray, np.ndarray]:
    """Radial-sphere and sphere-sphere sectional curvatures per node."""
    if p.is_torus:
        zeros = np.zeros(p.grid_shape)
        return zeros, zeros
    if np.any(p.b[1:-1] <= 0):
        raise DegenerateMetricError("b <= 0 at an interior node")
    k_rad = -p.b_ss_over_b
    k_sph = np.empty_like(k_rad)
    interior = slice(1, -1)
    k_sph[interior] = (1.0 - p.b_s[interior] ** 2) / p.b[interior] ** 2
    # both planes share the same limit at a smooth pole
    k_sph[0] = k_rad[0]
    k_sph[-1] = k_rad[-1]
    return k_rad, k_sph


def curvature(p: WarpedProfile) -> CurvatureField:
    if p.is_torus:
        zeros = np.zeros(p.grid_shape)
        return CurvatureField(zeros, zeros, zeros, zeros)
    k_rad, k_sph = sectional_curvatures(p)
    n = p.n
    ric_rad = (n - 1) * k_rad
    ric_sph = k_rad + (n - 2) * k_sph
    R = ric_rad + (n - 1) * ric_sph
    if n >= 3:
        rm_norm = np.maximum(np.abs(k_rad), np.abs(k_sph))
    else:
        rm_norm = np.abs(k_rad)
    return CurvatureField(R, ric_rad, ric_sph, rm_norm)


def _density_parity(n: int) -> int:
    # a is even and b odd across the poles, so a b^{n-1} has parity (-1)^{n-1}
    return EVEN if (n - 1) % 2 == 0 else ODD


def measure_weights(p: WarpedProfile) -> np.ndarray:
    """Quadrature weights of d(mu) at the nodes, exact for the reflected density interpolant."""
    if p.is_torus:
        return np.full(p.grid_shape, float(np.prod(p.sides)) / p.M ** p.n)
    density = unit_sphere_area(p.n - 1) * p.a * p.b ** (p.n - 1)
    return density * parity_quadrature_weights(p.M, _density_parity(p.n))


def cell_volumes(p: WarpedProfile) -> np.ndarray:
    """Dual-cell volumes: midpoint cells inside, analytic caps of radius dx/2 at the poles."""
    if p.is_torus:
        return measure_weights(p)
    n, dx = p.n, p.dx
    omega = unit_sphere_area(n - 1)
    volumes = omega * p.a * p.b ** (n - 1) * dx
    for pole in (0, -1):
        volumes[pole] = omega * p.a[pole] * abs(p.b_x[pole]) ** (n - 1) * (dx / 2.0) ** n / n
    return volumes


def total_volume(p: WarpedProfile) -> float:
    return float(np.sum(measure_weights(p)))


def integrate(p: WarpedProfile, values: np.ndarray) -> float:
    return float(np.sum(np.asarray(values) * measure_weights(p)))


def _torus_offsets(p: WarpedProfile, center: Sequence[float]) -> Tuple[np.ndarray, ...]:
    offsets = []
    for axis in range(p.n):
        side = p.sides[axis]
        delta = np.mod(p.axis_nodes(axis) - center[axis], side)
        offsets.append(np.minimum(delta, side - delta))
    return tuple(offsets)


def node_distances(p: WarpedProfile, center=0.0) -> np.ndarray:
    """Distance from a source to every node (pole of a warped sphere, any torus point)."""
    if p.is_torus:
        center = _torus_point(p, center)
        grids = np.meshgrid(*_torus_offsets(p, center), indexing="ij")
        return np.sqrt(sum(g ** 2 for g in grids))
    pole = _pole_index(center)
    s = p.arclength
    return s if pole == 0 else s[-1] - s


def _pole_index(center) -> int:
    if np.isclose(center, 0.0):
        return 0
    if np.isclose(center, 1.0):
        return -1
    raise InvalidParameterError(f"warped-sphere sources and ball centres sit at a pole, got x={center}")


def _torus_point(p: WarpedProfile, point) -> np.ndarray:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if point.size == 1 and p.n > 1:
        point = np.full(p.n, point[0])
    if point.size != p.n:
        raise InvalidParameterError(f"torus points need {p.n} coordinates")
    return point


def axis_arclength(p: WarpedProfile, x) -> np.ndarray:
    """Arclength from the pole x = 0 to arbitrary axis coordinates."""
    return parity_antiderivative(p.a, EVEN, x)


def geodesic_distance(p: WarpedProfile, x, y) -> float:
    if p.is_torus:
        x, y = _torus_point(p, x), _torus_point(p, y)
        sides = np.asarray(p.sides)
        delta = np.mod(y - x, sides)
        return float(np.linalg.norm(np.minimum(delta, sides - delta)))
    x, y = float(x), float(y)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise InvalidParameterError("axis coordinates must lie in [0, 1]")
    s = axis_arclength(p, [x, y])
    return float(abs(s[1] - s[0]))


def ball_volume(p: WarpedProfile, center, rho: float) -> float:
    if rho < 0:
        raise InvalidParameterError(f"ball radius must be non-negative, got {rho}")
    if p.is_torus:
        injectivity = min(p.sides) / 2.0
        if rho <= injectivity:
            return unit_ball_volume(p.n) * rho ** p.n
        # beyond the injectivity radius count lattice cells
        inside = node_distances(p, center) <= rho
        return float(np.sum(measure_weights(p)[inside]))
    if rho == 0:
        return 0.0
    if rho >= p.length:
        return total_volume(p)
    a, b = (p.a, p.b) if _pole_index(center) == 0 else (p.a[::-1], p.b[::-1])
    edge = brentq(lambda X: parity_antiderivative(a, EVEN, X)[0] - rho, 0.0, 1.0, xtol=1e-14)
    density = unit_sphere_area(p.n - 1) * a * b ** (p.n - 1)
    return float(parity_antiderivative(density, _density_parity(p.n), edge)[0])


def radial_derivatives(p: WarpedProfile, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Arclength derivatives (f_s, f_ss) of an even radial field."""
    f_s = parity_derivative(f, p.dx, EVEN) / p.a
    f_ss = parity_derivative(f_s, p.dx, ODD) / p.a
    return f_s, f_ss


def torus_gradient(p: WarpedProfile, f: np.ndarray) -> List[np.ndarray]:
    return [periodic_derivative(f, p.axis_spacing(axis), axis) for axis in range(p.n)]


def laplacian(p: WarpedProfile, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if p.is_torus:
        return sum(periodic_derivative(g, p.axis_spacing(axis), axis)
                   for axis, g in enumerate(torus_gradient(p, f)))
    f_s, f_ss = radial_derivatives(p, f)
    lap = np.empty_like(f)
    lap[1:-1] = f_ss[1:-1] + (p.n - 1) * p.b_s[1:-1] / p.b[1:-1] * f_s[1:-1]
    # (b_s / b) f_s -> f_ss at a smooth pole
    lap[0] = p.n * f_ss[0]
    lap[-1] = p.n * f_ss[-1]
    return lap


def gradient_squared(p: WarpedProfile, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if p.is_torus:
        return sum(g ** 2 for g in torus_gradient(p, f))
    f_s, _ = radial_derivatives(p, f)
    return f_s ** 2
