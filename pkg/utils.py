import hashlib
import re
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import fft

from config import DEFAULT_FILTER_ORDER, DEFAULT_FILTER_STRENGTH

# 17 significant digits round-trip every double exactly
FLOAT_FORMAT = "%.17g"

ODD = -1
EVEN = 1


def clean_name(name: str) -> str:
    """Normalise a check / artifact name into a filesystem-safe token"""
    if not name:
        return ""
    return re.sub(r"[^a-z0-9_]+", "_", str(name).strip().lower()).strip("_")


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _reflect(values: np.ndarray, parity: int) -> np.ndarray:
    """Extend a field on the M+1 nodes of [0, 1] to one period of [0, 2)."""
    interior = values[..., 1:-1][..., ::-1]
    return np.concatenate([values, parity * interior], axis=-1)


def parity_derivative(values: np.ndarray, dx: float, parity: int) -> np.ndarray:
    """d/dx of a field reflected with the given parity across both poles.

    Odd fields (b) become sine series and even fields (a, u, f) cosine series
    on the doubled interval, so the derivative is spectral and automatically
    respects the pole symmetry. The result has the opposite parity.
    """
    values = np.asarray(values, dtype=float)
    M = values.shape[-1] - 1
    extended = _reflect(values, parity)
    omega = 2.0 * np.pi * fft.fftfreq(2 * M, d=dx)
    omega[M] = 0.0
    derivative = fft.ifft(1j * omega * fft.fft(extended, axis=-1), axis=-1).real
    return derivative[..., : M + 1]


def parity_filter(values: np.ndarray, parity: int,
                  strength: float = DEFAULT_FILTER_STRENGTH,
                  order: int = DEFAULT_FILTER_ORDER) -> np.ndarray:
    """Exponential filter on the reflected series; leaves low modes untouched."""
    values = np.asarray(values, dtype=float)
    M = values.shape[-1] - 1
    extended = _reflect(values, parity)
    modes = np.abs(fft.fftfreq(2 * M) * 2 * M)
    sigma = np.exp(-strength * (modes / M) ** order)
    filtered = fft.ifft(sigma * fft.fft(extended, axis=-1), axis=-1).real
    return filtered[..., : M + 1]


def periodic_derivative(values: np.ndarray, spacing: float, axis: int) -> np.ndarray:
    """Spectral derivative of a periodic field along one axis."""
    values = np.asarray(values, dtype=float)
    size = values.shape[axis]
    omega = 2.0 * np.pi * fft.fftfreq(size, d=spacing)
    if size % 2 == 0:
        omega[size // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = size
    spectrum = fft.fft(values, axis=axis) * (1j * omega.reshape(shape))
    return fft.ifft(spectrum, axis=axis).real


def trapezoid_weights(times: Iterable[float]) -> np.ndarray:
    """Trapezoid quadrature weights for a (possibly non-uniform) node set."""
    t = np.asarray(list(times), dtype=float)
    weights = np.zeros_like(t)
    if t.size < 2:
        return weights
    gaps = np.diff(t)
    weights[:-1] += gaps / 2.0
    weights[1:] += gaps / 2.0
    return weights


def locate_time(times: np.ndarray, t: float, tol: float = 1e-9) -> int:
    """Index of a stored time, or -1 when t is not one of them."""
    times = np.asarray(times, dtype=float)
    scale = max(1.0, float(np.max(np.abs(times)))) if times.size else 1.0
    hits = np.flatnonzero(np.abs(times - t) <= tol * scale)
    return int(hits[0]) if hits.size else -1


def _spectrum(values: np.ndarray, parity: int):
    M = values.shape[-1] - 1
    coeffs = fft.fft(_reflect(np.asarray(values, dtype=float), parity)) / (2 * M)
    coeffs[M] = 0.0
    modes = fft.fftfreq(2 * M) * 2 * M
    return coeffs, modes


def parity_antiderivative(values: np.ndarray, parity: int, X) -> np.ndarray:
    """Integral from 0 to X of the reflected trigonometric interpolant of a node field."""
    coeffs, modes = _spectrum(values, parity)
    X = np.atleast_1d(np.asarray(X, dtype=float))
    phase = np.exp(1j * np.pi * np.outer(X, modes))
    kernel = np.empty_like(phase)
    nonzero = modes != 0
    kernel[:, nonzero] = (phase[:, nonzero] - 1.0) / (1j * np.pi * modes[nonzero])
    kernel[:, ~nonzero] = X[:, None]
    return (kernel @ coeffs).real


@lru_cache(maxsize=32)
def _quadrature_weights(M: int, parity: int) -> np.ndarray:
    if parity == EVEN:
        weights = np.full(M + 1, 1.0 / M)
        weights[[0, -1]] = 0.5 / M
        return weights
    # odd fields are sine series: integrate sin(k pi x) exactly for k < M
    i = np.arange(1, M)
    k = np.arange(1, M, 2)
    weights = np.zeros(M + 1)
    weights[1:-1] = 4.0 / (np.pi * M) * (np.sin(np.pi * np.outer(i, k) / M) / k).sum(axis=1)
    return weights


def parity_quadrature_weights(M: int, parity: int) -> np.ndarray:
    """Node weights integrating a reflected field over [0, 1] with spectral accuracy."""
    return _quadrature_weights(int(M), int(parity)).copy()
