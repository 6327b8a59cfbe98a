import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from sklearn.linear_model import LinearRegression

from config import DEFAULT_CFL, SINGULARITY_FLOOR, caps_with
from errors import (
    DegenerateMetricError,
    InterpolationError,
    InvalidParameterError,
    InvalidStateError,
    NoAdmissibleScaleError,
    OutOfDomainError,
    SingularityDetectedError,
    StepRejectedError,
)
from geometry import (
    WarpedProfile,
    ball_volume,
    blend_profiles,
    curvature,
    geodesic_distance,
    make_flat_torus,
    make_round_sphere,
    make_warped_sphere,
    node_distances,
    scale_lengths,
)
from models import CheckReport
from utils import EVEN, ODD, locate_time, parity_derivative, parity_filter

logger = logging.getLogger(__name__)

MIN_DT = 1e-14
ADMISSIBLE_SLACK = 1e-9


class FlowControl(BaseModel):
    cfl: float = DEFAULT_CFL
    snapshots: int = 10
    dt: Optional[float] = None
    estimate_error: bool = True
    filter_modes: bool = True
    max_steps: int = 5_000_000


@dataclass
class FlowTrajectory:
    profiles: List[WarpedProfile]
    T0: Optional[float] = None
    exact: bool = False
    D0: Optional[float] = None
    kappa: Optional[float] = None
    static: bool = False
    error_estimates: List[float] = field(default_factory=list)
    roundness: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.profiles:
            raise InvalidParameterError("trajectory needs at least one profile")
        times = self.times
        if np.any(np.diff(times) <= 0):
            raise InvalidParameterError("snapshot times must be strictly increasing")
        if self.T0 is not None and times[-1] >= self.T0:
            raise OutOfDomainError(f"snapshot at t={times[-1]} is not before T0={self.T0}")

    @property
    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.profiles])

    @property
    def n(self) -> int:
        return self.profiles[0].n

    @property
    def kind(self) -> str:
        return self.profiles[0].kind

    @property
    def M(self) -> int:
        return self.profiles[0].M

    def covers(self, t: float) -> bool:
        if self.exact:
            return t < self.T0
        if self.static:
            return True
        return self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12

    def radius_squared(self, t: float) -> float:
        """Closed-form r(t)^2 of the exact shrinking sphere."""
        if not self.exact:
            raise InvalidStateError("closed-form radius exists only for exact trajectories")
        if t >= self.T0:
            raise OutOfDomainError(f"t={t} is not before T0={self.T0}")
        return 2.0 * (self.n - 1) * (self.T0 - t)

    def profile_at(self, t: float) -> WarpedProfile:
        if self.exact:
            return make_round_sphere(self.n, math.sqrt(self.radius_squared(t)), self.M, t)
        if self.static:
            return self.profiles[0].with_time(t)
        times = self.times
        idx = locate_time(times, t)
        if idx >= 0:
            return self.profiles[idx]
        if not self.covers(t):
            raise InterpolationError(f"t={t} outside trajectory span [{times[0]}, {times[-1]}]")
        right = int(np.searchsorted(times, t))
        return blend_profiles(self.profiles[right - 1], self.profiles[right], t)

    def summary(self) -> Dict:
        return {
            "n": self.n,
            "kind": self.kind,
            "T0": self.T0 if self.T0 is not None and math.isfinite(self.T0) else None,
            "times": [float(t) for t in self.times],
            "D0": self.D0,
            "kappa": self.kappa,
            "exact": self.exact,
            "static": self.static,
            "M": self.M,
            "error_estimates": [float(e) for e in self.error_estimates],
        }


def exact_sphere_trajectory(n: int, T0: float, t_list: Sequence[float], M: int = 64) -> FlowTrajectory:
    """Ancient round sphere with r(t)^2 = 2(n-1)(T0 - t)."""
    times = sorted(set(float(t) for t in t_list))
    if not times:
        raise InvalidParameterError("t_list is empty")
    bad = [t for t in times if t >= T0]
    if bad:
        raise OutOfDomainError(f"times {bad} are not before T0={T0}")
    profiles = [make_round_sphere(n, math.sqrt(2.0 * (n - 1) * (T0 - t)), M, t) for t in times]
    return FlowTrajectory(profiles, T0=float(T0), exact=True)


def stable_dt(p: WarpedProfile, cfl: float = DEFAULT_CFL) -> float:
    if p.is_torus:
        return math.inf
    return cfl * (float(np.min(p.a)) * p.dx) ** 2 / (p.n - 1)


def _regularize_poles(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Restore b_x(0) = a(0) and b_x(1) = -a(1).

    A pole slope mismatch d turns (n-2)(b_s^2 - 1)/b into roughly 2(n-2)d/s
    near the pole, which grows without bound, so it is removed by adding
    sine-series corrections whose slopes are (1, 0) and (0, -1) at the poles.
    """
    b_x = parity_derivative(b, 1.0 / (len(x) - 1), ODD)
    left = a[0] - b_x[0]
    right = b_x[-1] + a[-1]
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    corrected = b + left * s * (1.0 + c) / (2.0 * np.pi) + right * s * (1.0 - c) / (2.0 * np.pi)
    corrected[0] = 0.0
    corrected[-1] = 0.0
    return corrected


def _flow_rhs(n: int, dx: float, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if np.any(b[1:-1] <= 0) or not np.all(np.isfinite(b)):
        raise SingularityDetectedError("warping radius collapsed inside an integrator stage")
    b_x = parity_derivative(b, dx, ODD)
    b_s = b_x / a
    b_ss = parity_derivative(b_s, dx, EVEN) / a
    ratio = np.empty_like(b)
    ratio[1:-1] = b_ss[1:-1] / b[1:-1]
    slope = parity_derivative(b_ss, dx, ODD)
    ratio[0] = slope[0] / b_x[0]
    ratio[-1] = slope[-1] / b_x[-1]
    db = np.zeros_like(b)
    db[1:-1] = b_ss[1:-1] + (n - 2) * (b_s[1:-1] ** 2 - 1.0) / b[1:-1]
    da = (n - 1) * ratio * a
    return da, db


def step_ricci_flow(p: WarpedProfile, dt: float, cfl: float = DEFAULT_CFL,
                    filter_modes: bool = True) -> WarpedProfile:
    """One RK4 step of the reduced Ricci flow in the fixed x-gauge."""
    if dt <= 0:
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    if p.is_torus:
        return p.with_time(p.t + dt)
    limit = stable_dt(p, cfl)
    if dt > limit * (1.0 + 1e-12):
        raise StepRejectedError(f"dt={dt:.3e} exceeds stability bound {limit:.3e}", suggested_dt=limit)
    n, dx, x = p.n, p.dx, p.x

    def stage(a_: np.ndarray, b_: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _flow_rhs(n, dx, a_, _regularize_poles(x, a_, b_))

    a, b = p.a, p.b
    k1 = stage(a, b)
    k2 = stage(a + 0.5 * dt * k1[0], b + 0.5 * dt * k1[1])
    k3 = stage(a + 0.5 * dt * k2[0], b + 0.5 * dt * k2[1])
    k4 = stage(a + dt * k3[0], b + dt * k3[1])
    a_new = a + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    b_new = b + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    if filter_modes:
        a_new = parity_filter(a_new, EVEN)
        b_new = parity_filter(b_new, ODD)
    b_new = _regularize_poles(x, a_new, b_new)
    if not np.all(np.isfinite(b_new)) or np.any(b_new[1:-1] <= SINGULARITY_FLOOR):
        raise SingularityDetectedError(f"warping radius reached zero near t={p.t + dt:.6g}")
    try:
        return WarpedProfile(n, p.kind, p.x, a_new, b_new, p.t + dt)
    except DegenerateMetricError as exc:
        raise SingularityDetectedError(f"metric degenerated near t={p.t + dt:.6g}: {exc}") from exc


def _advance(p: WarpedProfile, target: float, ctrl: FlowControl) -> Tuple[WarpedProfile, int, float]:
    """March to the target time; returns (profile, steps taken, last dt)."""
    steps = 0
    dt = 0.0
    while target - p.t > 1e-14 * max(1.0, abs(target)):
        dt = min(ctrl.dt or stable_dt(p, ctrl.cfl), target - p.t)
        while True:
            try:
                p = step_ricci_flow(p, dt, ctrl.cfl, ctrl.filter_modes)
                break
            except StepRejectedError as exc:
                logger.warning(f"Step rejected at t={p.t:.6g}: {exc.message}; halving dt")
                dt = min(dt / 2.0, exc.suggested_dt)
                if dt < MIN_DT:
                    raise SingularityDetectedError(f"stable step collapsed below {MIN_DT} at t={p.t:.6g}")
        steps += 1
        if steps > ctrl.max_steps:
            raise SingularityDetectedError(f"step budget exhausted at t={p.t:.6g}")
    return p, steps, dt


def _local_error(p: WarpedProfile, dt: float, ctrl: FlowControl) -> float:
    """Step-doubling estimate of the RK4 local error, relative to max b."""
    if p.is_torus or dt <= 0:
        return 0.0
    try:
        full = step_ricci_flow(p, dt, ctrl.cfl, ctrl.filter_modes)
        half = step_ricci_flow(step_ricci_flow(p, dt / 2, ctrl.cfl, ctrl.filter_modes),
                               dt / 2, ctrl.cfl, ctrl.filter_modes)
    except (SingularityDetectedError, StepRejectedError):
        return math.nan
    return float(np.max(np.abs(full.b - half.b)) / (15.0 * np.max(half.b)))


def roundness(p: WarpedProfile) -> float:
    if p.is_torus:
        return 0.0
    R = curvature(p).R
    return float(np.max(R) / np.min(R) - 1.0)


def integrate(p: WarpedProfile, t0: float, t1: float,
              ctrl: Optional[FlowControl] = None) -> FlowTrajectory:
    ctrl = ctrl or FlowControl()
    if t1 <= t0:
        raise InvalidParameterError(f"need t0 < t1, got [{t0}, {t1}]")
    if ctrl.snapshots < 1:
        raise InvalidParameterError("at least one snapshot interval is required")
    p = p.with_time(t0)
    targets = np.linspace(t0, t1, ctrl.snapshots + 1)
    if p.is_torus:
        profiles = [p.with_time(float(t)) for t in targets]
        return FlowTrajectory(profiles, T0=math.inf, static=True,
                              error_estimates=[0.0] * len(profiles), roundness=[0.0] * len(profiles))

    profiles = [p]
    estimates = [0.0]
    shapes = [roundness(p)]
    accumulated = 0.0
    for target in targets[1:]:
        try:
            p, steps, dt = _advance(p, float(target), ctrl)
        except SingularityDetectedError as exc:
            partial = FlowTrajectory(list(profiles), error_estimates=estimates, roundness=shapes)
            partial.T0 = _safe_T0(partial)
            logger.warning(f"Singularity before t1={t1}: {exc.message}")
            raise SingularityDetectedError(exc.message, partial=partial) from exc
        p = p.with_time(float(target))
        if ctrl.estimate_error:
            accumulated += _local_error(p, dt, ctrl) * steps
        profiles.append(p)
        estimates.append(accumulated)
        shapes.append(roundness(p))
        logger.debug(f"snapshot t={target:.6g} after {steps} steps, error estimate {accumulated:.3e}")

    tr = FlowTrajectory(profiles, error_estimates=estimates, roundness=shapes)
    tr.T0 = _safe_T0(tr)
    logger.info(f"Integrated n={p.n} profile over [{t0}, {t1}] in {len(profiles)} snapshots")
    return tr


def _safe_T0(tr: FlowTrajectory) -> Optional[float]:
    try:
        T0 = estimate_T0(tr)
    except InvalidStateError:
        return None
    return T0 if T0 > tr.times[-1] else None


def neck_radius(p: WarpedProfile) -> float:
    """Smallest interior local minimum of b (a neck), else the equator max b."""
    b = p.b
    interior = np.arange(2, len(b) - 2)
    minima = [i for i in interior if b[i] <= b[i - 1] and b[i] <= b[i + 1]]
    if minima:
        return float(min(b[i] for i in minima))
    return float(np.max(b))


def estimate_T0(tr: FlowTrajectory, last: int = 5) -> float:
    """Extrapolate the neck (or equator) radius^2 linearly to zero."""
    if tr.exact or tr.static:
        if tr.T0 is None:
            raise InvalidStateError("trajectory has no final time")
        return tr.T0
    profiles = tr.profiles[-last:]
    if len(profiles) < 2:
        raise InvalidStateError("need at least two snapshots to extrapolate T0")
    t = np.array([p.t for p in profiles]).reshape(-1, 1)
    r2 = np.array([neck_radius(p) ** 2 for p in profiles])
    fit = LinearRegression().fit(t, r2)
    slope = float(fit.coef_[0])
    if slope >= 0:
        raise InvalidStateError("radius is not shrinking; no finite extinction time")
    return float(-fit.intercept_ / slope)


def type_one_constant(tr: FlowTrajectory) -> float:
    """D0 = sup |Rm| (T0 - t) over snapshots and nodes."""
    if len(tr.profiles) < 2:
        raise InvalidStateError("type I constant needs at least two snapshots")
    if tr.T0 is None:
        raise InvalidStateError("trajectory has no final time T0")
    D0 = 0.0
    for p in tr.profiles:
        rm = float(np.max(curvature(p).rm_norm))
        if rm == 0.0:
            continue
        if not math.isfinite(tr.T0):
            raise InvalidStateError("curved trajectory with infinite T0")
        D0 = max(D0, rm * (tr.T0 - p.t))
    tr.D0 = D0
    return D0


def _centres(p: WarpedProfile) -> List:
    if p.is_torus:
        return [np.zeros(p.n)]
    return [0.0, 1.0]


def _window_profiles(tr: FlowTrajectory, t0: float, r: float) -> Optional[List[WarpedProfile]]:
    start = t0 - r * r
    if not tr.covers(start):
        return None
    if tr.exact:
        return [tr.profile_at(t) for t in np.linspace(start, t0, 5)]
    if tr.static:
        return [tr.profile_at(t0)]
    times = tr.times
    inside = [tr.profiles[i] for i in np.flatnonzero((times >= start) & (times < t0))]
    return inside + [tr.profile_at(t0)]


def kappa_estimate(tr: FlowTrajectory, scales: Sequence[float]) -> float:
    """min |B(x0, r, t0)| / r^n over samples whose parabolic ball has |Rm| <= r^-2."""
    scales = [float(r) for r in scales]
    if not scales:
        raise NoAdmissibleScaleError("no scales given")
    if any(r <= 0 for r in scales):
        raise InvalidParameterError("scales must be positive")
    kappa = math.inf
    for p0 in tr.profiles:
        for centre in _centres(p0):
            for r in scales:
                window = _window_profiles(tr, p0.t, r)
                if window is None:
                    continue
                admissible = True
                for q in window:
                    rm = curvature(q).rm_norm
                    near = node_distances(q, centre) <= r
                    if np.any(rm[near] > (1.0 + ADMISSIBLE_SLACK) / r ** 2):
                        admissible = False
                        break
                if admissible:
                    kappa = min(kappa, ball_volume(p0, centre, r) / r ** p0.n)
    if not math.isfinite(kappa):
        raise NoAdmissibleScaleError("no sample satisfied the curvature scale condition")
    tr.kappa = kappa
    return kappa


def doubling_checks(tr: FlowTrajectory, pairs: Sequence[Sequence], times: Sequence[Sequence[float]],
                    caps: Optional[Dict[str, float]] = None) -> CheckReport:
    """Distance and ball-volume comparability between times t2 < t1 < 0."""
    caps = caps_with(caps)
    if tr.D0 is None:
        type_one_constant(tr)
    rows = []
    notes = []
    exponents = []
    volume_ratios = []
    for t1, t2 in times:
        if not (t2 < t1 < 0):
            raise InvalidParameterError(f"doubling times must satisfy t2 < t1 < 0, got ({t1}, {t2})")
        p1, p2 = tr.profile_at(t1), tr.profile_at(t2)
        log_t = math.log(abs(t1) / abs(t2))
        for x, y in pairs:
            d1 = geodesic_distance(p1, x, y)
            d2 = geodesic_distance(p2, x, y)
            if d1 == 0 or d2 == 0:
                notes.append(f"degenerate pair ({x}, {y}) skipped")
                continue
            exponent = math.log(d1 / d2) / log_t
            exponents.append(exponent)
            if d1 > d2 * (1 + 1e-12) and not p1.is_torus:
                notes.append(f"distance grew between t={t2} and t={t1} for pair ({x}, {y})")
            centre = x if p1.is_torus or np.isclose(x, 1.0) else 0.0
            v1 = ball_volume(p1, centre, math.sqrt(abs(t1))) / abs(t1) ** (p1.n / 2)
            v2 = ball_volume(p2, centre, math.sqrt(abs(t2))) / abs(t2) ** (p2.n / 2)
            volume_ratios.append(v1 / v2)
            rows.append({"t1": t1, "t2": t2, "d1": d1, "d2": d2, "exponent": exponent,
                         "volume_ratio": v1 / v2})
    if not exponents:
        return CheckReport(name="doubling", notes=notes + ["no usable pairs"], passed=False)
    worst = max(abs(e) for e in exponents)
    if tr.D0 > 0:
        c = worst / tr.D0
    else:
        c = 0.0 if worst < 1e-12 else math.inf
    vol_spread = max(max(volume_ratios), 1.0 / min(volume_ratios))
    passed = c <= caps["doubling_c"] and vol_spread <= caps["doubling_c"]
    margin = min(caps["doubling_c"] - c, caps["doubling_c"] - vol_spread)
    logger.info(f"Doubling check: max exponent {worst:.4g}, c*D0 fit c={c:.4g}")
    return CheckReport(
        name="doubling",
        samples=len(exponents),
        ratio_min=min(exponents),
        ratio_max=max(exponents),
        fitted_constants={"c": c, "D0": tr.D0, "volume_spread": vol_spread},
        passed=passed,
        margin=margin,
        notes=notes,
        rows=rows,
    )


def normalize_type_I(tr: FlowTrajectory) -> FlowTrajectory:
    """g~ = g/(T0-t) at t~ = -ln(T0-t), i.e. g/(1-t) at -ln(1-t) when T0 = 1.

    Numeric trajectories use their extrapolated T0.
    """
    T0 = tr.T0
    if T0 is None:
        T0 = _safe_T0(tr)
    if T0 is None or not math.isfinite(T0):
        raise InvalidStateError(f"normalisation needs a finite extinction time, got {tr.T0}")
    late = [p.t for p in tr.profiles if p.t >= T0]
    if late:
        raise OutOfDomainError(f"snapshots at t >= T0={T0}: {late}")
    profiles = [scale_lengths(p, 1.0 / math.sqrt(T0 - p.t), -math.log(T0 - p.t)) for p in tr.profiles]
    return FlowTrajectory(profiles, T0=math.inf, error_estimates=list(tr.error_estimates))


def build_trajectory(model, flow, ctrl: Optional[FlowControl] = None) -> FlowTrajectory:
    """Trajectory for a scenario model over the flow span."""
    ctrl = ctrl or FlowControl(cfl=flow.cfl, snapshots=flow.snapshots)
    if model.kind == "exact_sphere":
        times = np.linspace(flow.t_start, flow.t_end, flow.snapshots + 1)
        return exact_sphere_trajectory(model.n, model.T0, times, model.M)
    if model.kind == "flat_torus":
        p = make_flat_torus(model.n, model.sides, model.M, flow.t_start)
    else:
        p = make_warped_sphere(model.n, model.r0, model.M, flow.t_start, model.amplitude, model.mode)
    return integrate(p, flow.t_start, flow.t_end, ctrl)


class FlowAgent:
    def __init__(self, caps: Dict[str, float] = None):
        self.caps = caps_with(caps)

    def run(self, scenario) -> Dict:
        """Build the trajectory and its Type I / non-collapsing diagnostics"""
        tr = build_trajectory(scenario.model, scenario.flow)
        result = {"status": "success", "trajectory": tr, "reports": [], "notes": []}
        try:
            result["D0"] = type_one_constant(tr)
        except InvalidStateError as exc:
            result["notes"].append(exc.message)
        if scenario.flow.kappa_scales:
            try:
                result["kappa"] = kappa_estimate(tr, scenario.flow.kappa_scales)
            except NoAdmissibleScaleError as exc:
                result["notes"].append(exc.message)
        if scenario.flow.doubling_times and tr.D0 is not None:
            result["reports"].append(
                doubling_checks(tr, scenario.flow.doubling_pairs, scenario.flow.doubling_times, self.caps)
            )
        logger.info(f"Flow stage finished for {tr.kind} n={tr.n}, D0={tr.D0}, kappa={tr.kappa}")
        return result


def flow_node(state: dict) -> dict:
    """LangGraph node for the flow stage"""
    scenario = state.get("scenario")
    if scenario is None:
        return {"flow_result": {"status": "error", "message": "Missing scenario"},
                "flow_errors": ["Missing scenario"]}
    result = FlowAgent(scenario.flow.caps).run(scenario)
    return {"flow_result": result, "trajectory": result["trajectory"]}
