import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import fft
from scipy.sparse import diags
from scipy.sparse.linalg import spsolve
from scipy.special import binom, eval_gegenbauer

from config import (
    DEFAULT_KERNEL_DT,
    DEFAULT_SEED_FACTOR,
    SERIES_MAX_TERMS,
    SERIES_TOLERANCE,
    UNDERSHOOT_TOLERANCE,
)
from errors import (
    InterpolationError,
    InvalidIntervalError,
    InvalidParameterError,
    InvalidStateError,
    SeriesNotConvergentError,
    SolverInstabilityError,
)
from geometry import (
    WarpedProfile,
    cell_volumes,
    curvature,
    laplacian,
    measure_weights,
    node_distances,
    unit_sphere_area,
)
from models import CheckReport
from utils import locate_time

logger = logging.getLogger(__name__)

FORWARD = "forward"
CONJUGATE = "conjugate"
SEED_SENSITIVITY_LIMIT = 5e-3


@dataclass
class KernelField:
    """Samples of G on a space-time grid.

    Forward fields hold y -> G(x0, l; y, t) at times t > l. Conjugate fields hold
    x -> G(x, t; x0, t0) at times t = t0 - s < t0.
    """
    kind: str
    n: int
    source: object
    source_time: float
    direction: str
    times: np.ndarray
    values: np.ndarray
    measures: np.ndarray
    distances: np.ndarray
    seed_eps: float
    source_measure: Optional[np.ndarray] = None
    solver: Dict = field(default_factory=dict)
    homogeneous: bool = False

    @property
    def elapsed(self) -> np.ndarray:
        """Parabolic separation |t - source_time| per stored time."""
        return np.abs(self.times - self.source_time)

    @property
    def is_torus(self) -> bool:
        return self.kind == "flat_torus"

    @property
    def source_index(self):
        shape = self.values.shape[1:]
        if not self.is_torus:
            return 0 if np.isclose(self.source, 0.0) else shape[0] - 1
        sides = np.asarray(self.solver["sides"])
        point = np.atleast_1d(np.asarray(self.source, dtype=float))
        if point.size == 1:
            point = np.full(self.n, point[0])
        return tuple(int(round(c / side * m)) % m for c, side, m in zip(point, sides, shape))

    def index(self, t: float) -> int:
        k = locate_time(self.times, t)
        if k < 0:
            raise InvalidParameterError(f"t={t} is not a stored kernel time")
        return k

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]

    def source_values(self) -> np.ndarray:
        """On-diagonal samples G at the source node, one per time."""
        return np.array([self.values[k][self.source_index] for k in range(len(self.times))])

    def clamped(self) -> np.ndarray:
        return np.maximum(self.values, 0.0)


def _theta(p: WarpedProfile, x0: float) -> np.ndarray:
    return np.pi * (p.x if np.isclose(x0, 0.0) else 1.0 - p.x)


def _check_pole(x0) -> float:
    if not (np.isclose(x0, 0.0) or np.isclose(x0, 1.0)):
        raise InvalidParameterError(f"warped-model sources sit at a pole, got x0={x0}")
    return float(x0)


def unit_sphere_heat(n: int, theta, Theta: float):
    """Heat kernel of the unit n-sphere at angle theta after time Theta."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if Theta <= 0:
        raise SeriesNotConvergentError("zero diffusion time: the kernel is a delta at the source")
    alpha = (n - 1) / 2.0
    cos_theta = np.cos(theta)
    total = np.zeros_like(theta)
    for k in range(SERIES_MAX_TERMS):
        weight = (2 * k + n - 1) / (n - 1) * math.exp(-k * (k + n - 1) * Theta)
        total += weight * eval_gegenbauer(k, alpha, cos_theta)
        # |C_k(cos)| <= C_k(1); terms decay monotonically once k(k+n-1)Theta dominates
        bound = weight * binom(k + n - 2, k)
        if k > 2 and bound < SERIES_TOLERANCE:
            return total / unit_sphere_area(n)
    raise SeriesNotConvergentError(f"series did not converge within {SERIES_MAX_TERMS} terms")


def spectral_kernel_sphere(tr, l: float, t: float, theta):
    """Exact G on the shrinking round sphere between times l < t at central angle theta."""
    if not tr.exact:
        raise InvalidStateError("spectral oracle needs an exact round-sphere trajectory")
    if t <= l:
        raise InvalidIntervalError(f"need l < t, got l={l}, t={t}")
    n = tr.n
    r2_l, r2_t = tr.radius_squared(l), tr.radius_squared(t)
    Theta = math.log(r2_l / r2_t) / (2.0 * (n - 1))
    values = unit_sphere_heat(n, theta, Theta) / r2_l ** (n / 2.0)
    return float(values[0]) if np.isscalar(theta) else values


def periodic_gaussian(nodes: np.ndarray, centre: float, side: float, tau: float) -> np.ndarray:
    """1-D Euclidean heat kernel summed over the lattice images."""
    images = int(math.ceil(math.sqrt(160.0 * tau) / side)) + 1
    shifts = np.arange(-images, images + 1) * side
    delta = nodes[:, None] - centre + shifts[None, :]
    return np.exp(-delta ** 2 / (4.0 * tau)).sum(axis=1) / math.sqrt(4.0 * math.pi * tau)


def _torus_point(n: int, x0) -> np.ndarray:
    point = np.atleast_1d(np.asarray(x0, dtype=float))
    if point.size == 1:
        point = np.full(n, point[0])
    if point.size != n:
        raise InvalidParameterError(f"torus source needs {n} coordinates")
    return point


def image_sum_kernel_torus(p: WarpedProfile, x0, tau: float) -> np.ndarray:
    if tau <= 0:
        raise InvalidIntervalError("image sum needs positive elapsed time")
    point = _torus_point(p.n, x0)
    factors = [periodic_gaussian(p.axis_nodes(axis), point[axis], p.sides[axis], tau)
               for axis in range(p.n)]
    return reduce(np.multiply.outer, factors)


def _assemble(tr, x0, source_time, times, direction, values, eps, solver,
              weights=measure_weights) -> KernelField:
    profiles = [tr.profile_at(float(t)) for t in times]
    p0 = profiles[0]
    if p0.is_torus:
        solver = dict(solver, sides=list(p0.sides))
    return KernelField(
        kind=p0.kind,
        n=p0.n,
        source=x0,
        source_time=float(source_time),
        direction=direction,
        times=np.asarray(times, dtype=float),
        values=np.asarray(values),
        measures=np.array([weights(p) for p in profiles]),
        distances=np.array([node_distances(p, x0) for p in profiles]),
        seed_eps=eps,
        source_measure=weights(tr.profile_at(float(source_time))) if tr.covers(source_time) else None,
        solver=solver,
        homogeneous=bool(tr.exact or (p0.is_torus and tr.static)),
    )


def oracle_kernel_field(tr, x0, source_time: float, times: Sequence[float],
                        direction: str = FORWARD) -> KernelField:
    """Exact kernel field: spectral series on exact spheres, image sums on static tori."""
    times = np.asarray(sorted(float(t) for t in times))
    values = []
    for t in times:
        elapsed = t - source_time if direction == FORWARD else source_time - t
        if elapsed <= 0:
            raise InvalidIntervalError(f"time {t} is not separated from the source time {source_time}")
        p = tr.profile_at(float(t))
        if p.is_torus and tr.static:
            values.append(image_sum_kernel_torus(p, x0, elapsed))
        elif tr.exact:
            theta = _theta(p, _check_pole(x0))
            if direction == FORWARD:
                values.append(spectral_kernel_sphere(tr, source_time, t, theta))
            else:
                # G(x, t; x0, t0) with the roles of the two points swapped on a homogeneous model
                values.append(spectral_kernel_sphere(tr, t, source_time, theta))
        else:
            raise InvalidStateError("no closed-form kernel for this trajectory")
    return _assemble(tr, x0, source_time, times, direction, values, 0.0, {"scheme": "oracle"})


def _fv_operator(p: WarpedProfile):
    """Conservative finite-volume Laplacian: (A u)_i / V_i approximates (Delta u)_i."""
    n, dx = p.n, p.dx
    b_face = 0.5 * (p.b[:-1] + p.b[1:])
    a_face = 0.5 * (p.a[:-1] + p.a[1:])
    c = unit_sphere_area(n - 1) * b_face ** (n - 1) / (a_face * dx)
    diagonal = np.zeros(p.M + 1)
    diagonal[:-1] -= c
    diagonal[1:] -= c
    return diags([c, diagonal, c], [-1, 0, 1], format="csc"), cell_volumes(p)


def _check_undershoot(u: np.ndarray, t: float):
    peak = float(np.max(u))
    if float(np.min(u)) < -UNDERSHOOT_TOLERANCE * peak:
        raise SolverInstabilityError(f"kernel undershoot {np.min(u):.3e} at t={t:.6g}")


def _march(grid_targets, start, dt):
    """Yield (t_old, t_new, is_output) steps landing exactly on every target.

    Each target is announced once by a zero-length step after it is reached.
    """
    t = start
    for target in grid_targets:
        while target - t > 1e-12:
            t_new = min(t + dt, target)
            if target - t_new <= 1e-12:
                t_new = target
            yield t, t_new, False
            t = t_new
        yield t, t, True


def _gaussian_seed(p: WarpedProfile, x0, eps: float, mass: float) -> np.ndarray:
    d = node_distances(p, x0)
    seed = np.exp(-d ** 2 / (4.0 * eps))
    return seed * mass / float(np.sum(seed * cell_volumes(p)))


def _sphere_seed(tr, x0, source_time, eps, direction) -> np.ndarray:
    seed_time = source_time + eps if direction == FORWARD else source_time - eps
    p = tr.profile_at(seed_time)
    if tr.exact:
        if direction == FORWARD:
            seed = spectral_kernel_sphere(tr, source_time, seed_time, _theta(p, x0))
            mass = (tr.radius_squared(seed_time) / tr.radius_squared(source_time)) ** (p.n / 2.0)
        else:
            seed = spectral_kernel_sphere(tr, seed_time, source_time, _theta(p, x0))
            mass = 1.0
        return seed * mass / float(np.sum(seed * cell_volumes(p)))
    if direction == FORWARD:
        R0 = curvature(tr.profile_at(source_time)).R[0 if np.isclose(x0, 0.0) else -1]
        mass = math.exp(-eps * R0)
    else:
        mass = 1.0
    return _gaussian_seed(p, x0, eps, mass)


def _solve_sphere(tr, x0, source_time, physical_times, eps, dt, direction):
    sign = 1.0 if direction == FORWARD else -1.0
    # march in elapsed time e = sign * (t - source_time)
    elapsed_targets = [sign * (t - source_time) for t in physical_times]
    u = _sphere_seed(tr, x0, source_time, eps, direction)
    p_old = tr.profile_at(source_time + sign * eps)
    A_old, V_old = _fv_operator(p_old)
    outputs = []
    for e_old, e_new, is_output in _march(elapsed_targets, eps, dt):
        if e_new > e_old:
            step = e_new - e_old
            A_new, V_new = _fv_operator(tr.profile_at(source_time + sign * e_new))
            if direction == FORWARD:
                rhs = V_new * u + 0.5 * step * (V_new / V_old) * (A_old @ u)
            else:
                # mass form: sum V u is conserved exactly
                rhs = V_old * u + 0.5 * step * (A_old @ u)
            lhs = diags(V_new, 0, format="csc") - 0.5 * step * A_new
            u = spsolve(lhs, rhs)
            _check_undershoot(u, source_time + sign * e_new)
            A_old, V_old = A_new, V_new
        if is_output:
            outputs.append(u.copy())
    return outputs


def _solve_torus(tr, x0, source_time, physical_times, eps, dt, direction):
    p = tr.profile_at(source_time)
    if not tr.static:
        raise InvalidStateError("torus kernels need a static trajectory")
    point = _torus_point(p.n, x0)
    M = p.M
    sign = 1.0 if direction == FORWARD else -1.0
    elapsed_targets = [sign * (t - source_time) for t in physical_times]
    modes = fft.fftfreq(M) * M
    spectra, symbols = [], []
    for axis in range(p.n):
        h = p.axis_spacing(axis)
        seed = periodic_gaussian(p.axis_nodes(axis), point[axis], p.sides[axis], eps)
        seed /= float(np.sum(seed) * h)
        spectra.append(fft.fft(seed))
        symbols.append(4.0 / h ** 2 * np.sin(np.pi * modes / M) ** 2)
    outputs = []
    for e_old, e_new, is_output in _march(elapsed_targets, eps, dt):
        if e_new > e_old:
            step = e_new - e_old
            spectra = [s * (1 - 0.5 * step * mu) / (1 + 0.5 * step * mu) for s, mu in zip(spectra, symbols)]
        if is_output:
            factors = [fft.ifft(s).real for s in spectra]
            u = reduce(np.multiply.outer, factors)
            _check_undershoot(u, source_time + sign * e_new)
            outputs.append(u)
    return outputs


def _solve(tr, x0, source_time, times, dt, seed_eps, direction) -> KernelField:
    if dt <= 0:
        raise InvalidParameterError("kernel dt must be positive")
    eps = DEFAULT_SEED_FACTOR * dt if seed_eps is None else float(seed_eps)
    if eps <= 0:
        raise InvalidParameterError("seed offset must be positive")
    sign = 1.0 if direction == FORWARD else -1.0
    times = sorted(set(float(t) for t in times))
    if not times:
        raise InvalidParameterError("no output times requested")
    if direction == FORWARD:
        times_in_march = times
    else:
        times_in_march = times[::-1]
    elapsed = [sign * (t - source_time) for t in times_in_march]
    if min(elapsed) <= 0:
        raise InvalidIntervalError("output times must lie strictly after the source time along the solve")
    if min(elapsed) < eps - 1e-12:
        raise InvalidIntervalError(f"output time closer to the source than the seed offset {eps}")
    for t in (source_time + sign * eps, *times):
        if not tr.covers(t):
            raise InterpolationError(f"trajectory does not cover t={t}")
    p = tr.profile_at(times[0])
    if p.is_torus:
        outputs = _solve_torus(tr, x0, source_time, times_in_march, eps, dt, direction)
    else:
        x0 = _check_pole(x0)
        outputs = _solve_sphere(tr, x0, source_time, times_in_march, eps, dt, direction)
    if direction == CONJUGATE:
        outputs = outputs[::-1]
    solver = {"dt": dt, "M": p.M, "scheme": "crank-nicolson", "eps": eps}
    kf = _assemble(tr, x0, source_time, times, direction, outputs, eps, solver, cell_volumes)
    logger.info(f"Solved {direction} kernel on {kf.kind} n={kf.n} with {len(times)} output times")
    return kf


def solve_forward_kernel(tr, x0, l: float, t_grid: Sequence[float], dt: float = DEFAULT_KERNEL_DT,
                         seed_eps: Optional[float] = None) -> KernelField:
    """G(x0, l; y, t) as a forward heat solution in (y, t), seeded at l + eps."""
    return _solve(tr, x0, l, t_grid, dt, seed_eps, FORWARD)


def solve_conjugate_kernel(tr, x0, t0: float, s_grid: Sequence[float], dt: float = DEFAULT_KERNEL_DT,
                           seed_eps: Optional[float] = None) -> KernelField:
    """G(x, t0 - s; x0, t0) by marching the conjugate heat equation in s = t0 - t."""
    s_grid = [float(s) for s in s_grid]
    if any(s <= 0 for s in s_grid):
        raise InvalidIntervalError("backward times must be positive")
    return _solve(tr, x0, t0, [t0 - s for s in s_grid], dt, seed_eps, CONJUGATE)


def _swapped_measure(kf: KernelField) -> np.ndarray:
    """Source-time weights, valid for the other point only when G depends on distance alone."""
    if not kf.homogeneous:
        raise InvalidStateError(f"{kf.direction} field on a non-homogeneous {kf.kind}: "
                                "the integral over the source point is not available")
    if kf.source_measure is None:
        raise InvalidStateError("source-time measure unavailable")
    return kf.source_measure


def forward_mass(kf: KernelField, t: float) -> float:
    """Integral of G over its second (forward) point."""
    k = kf.index(t)
    if kf.direction == FORWARD:
        return float(np.sum(kf.values[k] * kf.measures[k]))
    return float(np.sum(kf.values[k] * _swapped_measure(kf)))


def backward_mass(kf: KernelField, t: Optional[float] = None):
    """Integral of G over its first point; conserved (= 1) for the conjugate kernel.

    Returns the value at t, or one value per stored time when t is omitted.
    """
    if t is None:
        return np.array([backward_mass(kf, float(tk)) for tk in kf.times])
    k = kf.index(t)
    if kf.direction == CONJUGATE:
        return float(np.sum(kf.values[k] * kf.measures[k]))
    return float(np.sum(kf.values[k] * _swapped_measure(kf)))


def seed_sensitivity(tr, x0, source_time: float, times: Sequence[float], dt: float = DEFAULT_KERNEL_DT,
                     seed_eps: Optional[float] = None, direction: str = FORWARD) -> CheckReport:
    """Rerun with half the seed offset and report the relative change of the field."""
    eps = DEFAULT_SEED_FACTOR * dt if seed_eps is None else seed_eps
    if direction == FORWARD:
        coarse = solve_forward_kernel(tr, x0, source_time, times, dt, eps)
        fine = solve_forward_kernel(tr, x0, source_time, times, dt, eps / 2.0)
    else:
        s_grid = [source_time - t for t in times]
        coarse = solve_conjugate_kernel(tr, x0, source_time, s_grid, dt, eps)
        fine = solve_conjugate_kernel(tr, x0, source_time, s_grid, dt, eps / 2.0)
    changes = []
    rows = []
    for k, t in enumerate(coarse.times):
        peak = float(np.max(np.abs(fine.values[k])))
        change = float(np.max(np.abs(coarse.values[k] - fine.values[k]))) / peak
        changes.append(change)
        rows.append({"t": float(t), "relative_change": change})
    worst = max(changes)
    if worst >= SEED_SENSITIVITY_LIMIT:
        logger.warning(f"Seed sensitivity {worst:.3e} exceeds {SEED_SENSITIVITY_LIMIT}")
    return CheckReport(
        name="seed_sensitivity",
        samples=len(changes),
        ratio_min=min(changes),
        ratio_max=worst,
        fitted_constants={"eps": eps},
        passed=worst < SEED_SENSITIVITY_LIMIT,
        margin=SEED_SENSITIVITY_LIMIT - worst,
        rows=rows,
    )


def conjugate_residual(kf: KernelField, tr) -> np.ndarray:
    """Relative residual of the kernel's own heat equation at interior nodes, per inner time.

    Conjugate fields are checked against d_s u - Delta u + R u; forward fields against
    d_t u - Delta u. Time derivatives are central differences on the stored times.
    """
    if len(kf.times) < 3:
        raise InvalidParameterError("residual needs at least three stored times")
    residuals = []
    for k in range(1, len(kf.times) - 1):
        t = float(kf.times[k])
        p = tr.profile_at(t)
        u = kf.values[k]
        du = (kf.values[k + 1] - kf.values[k - 1]) / (kf.times[k + 1] - kf.times[k - 1])
        if kf.direction == FORWARD:
            res = du - laplacian(p, u)
        else:
            # d/ds = -d/dt
            res = -du - laplacian(p, u) + curvature(p).R * u
        if not p.is_torus:
            res = res[1:-1]
        residuals.append(float(np.max(np.abs(res)) / max(float(np.max(np.abs(du))), 1e-300)))
    return np.array(residuals)


class KernelAgent:
    def __init__(self, dt: float = DEFAULT_KERNEL_DT):
        self.dt = dt

    def run(self, scenario, trajectory) -> Dict:
        """Solve (or evaluate) the forward kernel requested by the scenario"""
        spec = scenario.kernel
        use_oracle = spec.method == "oracle" or (
            spec.method == "auto" and (trajectory.exact or trajectory.static)
        )
        if use_oracle:
            kf = oracle_kernel_field(trajectory, spec.source, spec.l, spec.t_list)
        else:
            kf = solve_forward_kernel(trajectory, spec.source, spec.l, spec.t_list,
                                      spec.dt, spec.seed_eps)
        masses = [forward_mass(kf, t) for t in kf.times]
        audit = [float(m) for m in backward_mass(kf)] if kf.homogeneous else None
        logger.info(f"Kernel stage: forward masses {masses}")
        return {"status": "success", "kernel": kf, "forward_mass": masses, "backward_mass": audit,
                "method": "oracle" if use_oracle else "solver"}


def kernel_node(state: dict) -> dict:
    """LangGraph node for the kernel stage"""
    scenario = state.get("scenario")
    trajectory = state.get("trajectory")
    if scenario is None or trajectory is None:
        return {"kernel_result": {"status": "error", "message": "Missing scenario or trajectory"},
                "kernel_errors": ["Missing scenario or trajectory"]}
    result = KernelAgent(scenario.kernel.dt).run(scenario, trajectory)
    return {"kernel_result": result, "kernel": result["kernel"]}
