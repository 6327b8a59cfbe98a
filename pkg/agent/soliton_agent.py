import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DENSITY_FLOOR, HEATLAB_THREADS, caps_with
from errors import HeatLabError, InterpolationError, InvalidParameterError, OutOfDomainError
from geometry import (
    WarpedProfile,
    curvature,
    make_flat_torus,
    make_round_sphere,
    measure_weights,
    radial_derivatives,
    round_radius,
    scale_lengths,
)
from models import LimitReport
from agent.entropy_agent import f_from_u, reduced_defect, w_entropy
from agent.kernel_agent import (
    CONJUGATE,
    KernelField,
    image_sum_kernel_torus,
    oracle_kernel_field,
    solve_conjugate_kernel,
)

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-8


def rescale(tr, tau: float, s: float, t0: float = 0.0) -> WarpedProfile:
    """g_k = g(t0 - s tau) / tau, labelled with rescaled time -s."""
    if tau <= 0 or s <= 0:
        raise InvalidParameterError(f"need tau > 0 and s > 0, got tau={tau}, s={s}")
    t = t0 - s * tau
    if not tr.covers(t):
        raise OutOfDomainError(f"trajectory does not reach t={t}")
    try:
        p = tr.profile_at(t)
    except InterpolationError as exc:
        raise OutOfDomainError(exc.message) from exc
    return scale_lengths(p, 1.0 / math.sqrt(tau), -s)


def rescaled_kernel(tr, kf: KernelField, tau: float, s: float) -> Tuple[np.ndarray, np.ndarray]:
    """(u_k, f_k) with u_k = tau^{n/2} G(., t0 - s tau; x0, t0)."""
    t = kf.source_time - s * tau
    try:
        k = kf.index(t)
    except InvalidParameterError as exc:
        raise OutOfDomainError(f"kernel has no sample at t={t}") from exc
    u_k = tau ** (kf.n / 2.0) * kf.values[k]
    return u_k, f_from_u(np.maximum(u_k, DENSITY_FLOOR), s, kf.n)


def rescaled_weights(kf: KernelField, tau: float, s: float) -> np.ndarray:
    """Node measure of the rescaled metric, consistent with the field's own quadrature."""
    return kf.measures[kf.index(kf.source_time - s * tau)] * tau ** (-kf.n / 2.0)


def _torus_hessian(p: WarpedProfile, f: np.ndarray) -> List[List[np.ndarray]]:
    """Central-difference Hessian; exact on quadratics away from the cut locus."""
    hess = [[None] * p.n for _ in range(p.n)]
    for i in range(p.n):
        h_i = p.axis_spacing(i)
        hess[i][i] = (np.roll(f, -1, i) - 2.0 * f + np.roll(f, 1, i)) / h_i ** 2
        for j in range(i + 1, p.n):
            h_j = p.axis_spacing(j)
            plus, minus = np.roll(f, -1, i), np.roll(f, 1, i)
            cross = (np.roll(plus, -1, j) - np.roll(plus, 1, j)
                     - np.roll(minus, -1, j) + np.roll(minus, 1, j)) / (4.0 * h_i * h_j)
            hess[i][j] = hess[j][i] = cross
    return hess


def soliton_residual(p: WarpedProfile, f: np.ndarray, s: float, u: np.ndarray,
                     weights: Optional[np.ndarray] = None) -> float:
    """int |Ric + Hess f - g/2s|^2 u dmu."""
    if s <= 0:
        raise InvalidParameterError(f"backward time must be positive, got {s}")
    weights = measure_weights(p) if weights is None else weights
    f = np.asarray(f, dtype=float)
    if p.is_torus:
        half = 1.0 / (2.0 * s)
        hess = _torus_hessian(p, f)
        defect = sum((hess[i][j] - (half if i == j else 0.0)) ** 2
                     for i in range(p.n) for j in range(p.n))
    else:
        f_s, f_ss = radial_derivatives(p, f)
        defect = reduced_defect(p, f_s, f_ss, s)
    return float(np.sum(defect * np.asarray(u) * weights))


def gaussian_reference_residual(n: int, s: float = 1.0, side: float = 40.0, M: int = 128) -> float:
    """Residual of the Gaussian shrinker on a wide flat torus (should vanish)."""
    p = make_flat_torus(n, [side] * n, M)
    centre = [side / 2.0] * n
    u = image_sum_kernel_torus(p, centre, s)
    return soliton_residual(p, f_from_u(u, s, n), s, u)


def round_reference_residual(n: int, s: float = 1.0, M: int = 64, stretch: float = 1.0) -> float:
    """Residual of the round sphere with r^2 = 2(n-1)s * stretch, constant f and uniform u."""
    p = make_round_sphere(n, math.sqrt(2.0 * (n - 1) * s * stretch), M)
    weights = measure_weights(p)
    u = np.full(p.grid_shape, 1.0 / float(np.sum(weights)))
    return soliton_residual(p, f_from_u(u, s, n), s, u, weights)


@dataclass
class LimitSample:
    tau: float
    residual: float
    W: float
    W_next: float
    f_variance: float
    radius_defect: Optional[float]
    max_R: float
    source_value: float


def _f_variance(f: np.ndarray, u: np.ndarray, weights: np.ndarray) -> float:
    w = np.maximum(u, 0.0) * weights
    mean = float(np.sum(f * w) / np.sum(w))
    return float(np.sum((f - mean) ** 2 * w) / np.sum(w))


def _sample_from_field(tr, kf: KernelField, tau: float, s_ref: float) -> LimitSample:
    values = {}
    for s in (s_ref, s_ref + 1.0):
        p_k = rescale(tr, tau, s, kf.source_time)
        u_k, f_k = rescaled_kernel(tr, kf, tau, s)
        weights = rescaled_weights(kf, tau, s)
        values[s] = (p_k, u_k, f_k, weights)
    p_k, u_k, f_k, weights = values[s_ref]
    radius = None if p_k.is_torus else round_radius(p_k)
    defect = None if radius is None else abs(radius ** 2 / s_ref - 2.0 * (p_k.n - 1))
    return LimitSample(
        tau=tau,
        residual=soliton_residual(p_k, f_k, s_ref, u_k, weights),
        W=w_entropy(p_k, u_k, s_ref, weights),
        W_next=w_entropy(*values[s_ref + 1.0][:2], s_ref + 1.0, values[s_ref + 1.0][3]),
        f_variance=_f_variance(f_k, u_k, weights),
        radius_defect=defect,
        max_R=float(np.max(curvature(p_k).R)),
        source_value=float(u_k[kf.source_index]),
    )


def _flat_sample(n: int, tau: float, s_ref: float, side: float, M: int) -> LimitSample:
    """Flat control: Euclidean kernel on a torus whose rescaled side stays fixed."""
    values = {}
    for s in (s_ref, s_ref + 1.0):
        p = make_flat_torus(n, [side * math.sqrt(tau)] * n, M, -s * tau)
        centre = [side * math.sqrt(tau) / 2.0] * n
        G = image_sum_kernel_torus(p, centre, s * tau)
        p_k = scale_lengths(p, 1.0 / math.sqrt(tau), -s)
        u_k = tau ** (n / 2.0) * G
        values[s] = (p_k, u_k, f_from_u(u_k, s, n), measure_weights(p_k))
    p_k, u_k, f_k, weights = values[s_ref]
    nxt = values[s_ref + 1.0]
    return LimitSample(
        tau=tau,
        residual=soliton_residual(p_k, f_k, s_ref, u_k, weights),
        W=w_entropy(p_k, u_k, s_ref, weights),
        W_next=w_entropy(nxt[0], nxt[1], s_ref + 1.0, nxt[3]),
        f_variance=_f_variance(f_k, u_k, weights),
        radius_defect=None,
        max_R=0.0,
        source_value=float(np.max(u_k)),
    )


def _limit_field(tr, tau: float, s_ref: float, x0, t0: float, dt: Optional[float]) -> KernelField:
    times = [t0 - (s_ref + 1.0) * tau, t0 - s_ref * tau]
    if tr.exact:
        return oracle_kernel_field(tr, x0, t0, times, CONJUGATE)
    # backward times grow with tau, so the step does too
    step = dt if dt is not None else 1e-3 * tau
    return solve_conjugate_kernel(tr, x0, t0, [s_ref * tau, (s_ref + 1.0) * tau], step)


def _strictly_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def backward_limit_experiment(tr, tau_list: Sequence[float], s_ref: float = 1.0, x0=0.0, t0: float = 0.0,
                              control: bool = False, torus_side: float = 40.0,
                              caps: Optional[Dict[str, float]] = None, dt: Optional[float] = None,
                              threads: int = HEATLAB_THREADS) -> LimitReport:
    """Rescale the conjugate kernel along tau_list and certify convergence to a non-flat shrinker."""
    caps = caps_with(caps)
    tau_list = [float(tau) for tau in tau_list]
    if not tau_list or any(b <= a for a, b in zip(tau_list, tau_list[1:])) or tau_list[0] <= 0:
        raise InvalidParameterError("tau_list must be positive and strictly increasing")
    if s_ref <= 0:
        raise InvalidParameterError("s_ref must be positive")
    flat = tr.static and tr.kind == "flat_torus"
    notes = []

    def one(tau: float) -> LimitSample:
        if flat:
            return _flat_sample(tr.n, tau, s_ref, torus_side, tr.M)
        kf = _limit_field(tr, tau, s_ref, x0, t0, dt)
        return _sample_from_field(tr, kf, tau, s_ref)

    samples: List[LimitSample] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(one, tau) for tau in tau_list]
        for tau, future in zip(tau_list, futures):
            try:
                samples.append(future.result())
            except HeatLabError as exc:
                notes.append(f"tau={tau:g}: {exc.code}: {exc.message}")
                logger.warning(f"❌ Limit sample at tau={tau:g} failed: {exc.message}")
                break

    report = LimitReport(
        tau_list=tau_list,
        s_ref=s_ref,
        residual_seq=[x.residual for x in samples],
        W_seq=[x.W for x in samples],
        W_next_seq=[x.W_next for x in samples],
        W_gap_seq=[x.W - x.W_next for x in samples],
        f_variance_seq=[x.f_variance for x in samples],
        radius_defect_seq=[x.radius_defect for x in samples if x.radius_defect is not None],
        notes=notes,
        control=control or flat,
    )
    if not samples:
        report.notes.append("no limit samples computed")
        return report
    defects = [(x.tau, x.radius_defect) for x in samples if x.radius_defect is not None]
    if defects:
        report.rate_constant = max(tau * d for tau, d in defects)
    report.limit_max_R = samples[-1].max_R
    report.nonflat = samples[-1].W < -caps["nonflat_W"] or samples[-1].max_R > caps["nonflat_R"]

    residuals = report.residual_seq
    tail = residuals[-3:]
    W_monotone = all(b <= a + MONOTONE_SLACK for a, b in zip(report.W_seq, report.W_seq[1:]))
    if len(samples) < len(tau_list):
        report.notes.append("partial report: some rescaling times failed")
    if not _strictly_decreasing(tail):
        report.notes.append("soliton residual is not strictly decreasing over the last samples")
    if not W_monotone:
        report.notes.append("W_k(s_ref) increased with k")
    if not report.nonflat:
        report.notes.append("limit is not certified non-flat")
    if report.control:
        report.notes.append("flat control run: a non-flat limit is not expected")
    if (len(samples) == len(tau_list) and _strictly_decreasing(tail) and W_monotone
            and report.nonflat and min(residuals) >= 0):
        report.verdict = "pass"
    if not flat and samples:
        a1 = max(x.source_value for x in samples) * s_ref ** (tr.n / 2.0)
        floor = 1.0 / (2 ** tr.n * a1)
        if min(x.source_value for x in samples) < floor:
            report.notes.append(f"u_k(x0, s_ref) fell below 1/(2^n a1) = {floor:.4g}")
    logger.info(f"Limit experiment finished: verdict={report.verdict}, nonflat={report.nonflat}")
    return report


class SolitonAgent:
    def __init__(self, caps: Dict[str, float] = None, threads: int = HEATLAB_THREADS):
        self.caps = caps_with(caps)
        self.threads = threads

    def run(self, scenario, trajectory) -> Dict:
        """Run the backward-limit experiment requested by the scenario"""
        spec = scenario.limit
        source = scenario.kernel.source if scenario.kernel is not None else 0.0
        report = backward_limit_experiment(
            trajectory,
            spec.tau_list,
            spec.s_ref,
            x0=source,
            t0=float(trajectory.times[-1]) if not trajectory.exact else 0.0,
            control=spec.control,
            torus_side=spec.torus_side,
            caps=self.caps,
            dt=spec.dt,
            threads=self.threads,
        )
        return {"status": "success", "limit_report": report}


def soliton_node(state: dict) -> dict:
    """LangGraph node for the backward-limit experiment"""
    scenario = state.get("scenario")
    trajectory = state.get("trajectory")
    if scenario is None or trajectory is None or scenario.limit is None:
        return {"limit_result": {"status": "error", "message": "Missing scenario, trajectory or limit spec"},
                "limit_errors": ["Missing scenario, trajectory or limit spec"]}
    result = SolitonAgent(scenario.limit.caps, state.get("threads", HEATLAB_THREADS)).run(scenario, trajectory)
    return {"limit_result": result, "limit_report": result["limit_report"]}
