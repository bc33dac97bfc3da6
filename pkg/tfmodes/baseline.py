"""
Línea base de banda ancha V(t,f): pre-énfasis + mínimos cuadrados penalizados
asimétricos (suavizado de Whittaker con pesos IRLS) rodaja a rodaja.
"""
import logging
import threading
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .config import BaselineConfig
from .errors import DimMismatchError, InvalidParameterError, NonFiniteError, SingularSystemError
from .tfa import Spectrogram, SpectrogramKind, require_kind

logger = logging.getLogger(__name__)

MAD_TO_STD = 1.4826
MIN_SLICE_LEN = 8
# residuos por encima de mediana + RECENTER_CLIP escalas no cuentan al recentrar
RECENTER_CLIP = 3.0
# el núcleo paralelo de numba no admite lanzamientos concurrentes desde varios hilos
_KERNEL_LOCK = threading.Lock()


@dataclass(frozen=True, eq=False)
class BaselineModel:
    baseline: np.ndarray
    residual_scale: np.ndarray
    iters_used: np.ndarray
    converged: np.ndarray
    guard_bins: int = 1

    @property
    def level(self) -> np.ndarray:
        """Nivel de banda ancha por trama (media de la línea base fuera de la guarda)."""
        return self.baseline[self.guard_bins:].mean(axis=0)

    def without_baseline(self) -> "BaselineModel":
        return replace(self, baseline=np.zeros_like(self.baseline))


# --- Núcleo numérico (numba) ---

@njit(cache=False)
def _solve_whittaker(w, lam, rhs):
    """
    Resuelve (diag(w) + lam * D'D) v = rhs con D la segunda diferencia,
    por factorización LDL' de la matriz pentadiagonal. Devuelve (v, ok).
    """
    n = w.size
    a = np.empty(n)
    b = np.empty(n)
    c = np.empty(n)
    for i in range(n):
        a[i] = 6.0
        b[i] = -4.0
        c[i] = 1.0
    a[0] = 1.0
    a[n - 1] = 1.0
    a[1] = 5.0
    a[n - 2] = 5.0
    b[0] = -2.0
    b[n - 2] = -2.0
    for i in range(n):
        a[i] = w[i] + lam * a[i]
        b[i] = lam * b[i]
        c[i] = lam * c[i]

    d = np.zeros(n)
    e = np.zeros(n)
    f = np.zeros(n)
    for i in range(n):
        di = a[i]
        if i >= 1:
            di -= e[i - 1] * e[i - 1] * d[i - 1]
        if i >= 2:
            di -= f[i - 2] * f[i - 2] * d[i - 2]
        if not di > 0.0:
            return np.zeros(n), False
        d[i] = di
        if i + 1 < n:
            bi = b[i]
            if i >= 1:
                bi -= f[i - 1] * e[i - 1] * d[i - 1]
            e[i] = bi / di
        if i + 2 < n:
            f[i] = c[i] / di

    z = np.empty(n)
    for i in range(n):
        zi = rhs[i]
        if i >= 1:
            zi -= e[i - 1] * z[i - 1]
        if i >= 2:
            zi -= f[i - 2] * z[i - 2]
        z[i] = zi
    for i in range(n):
        z[i] /= d[i]
    v = np.empty(n)
    for i in range(n - 1, -1, -1):
        vi = z[i]
        if i + 1 < n:
            vi -= e[i] * v[i + 1]
        if i + 2 < n:
            vi -= f[i] * v[i + 2]
        v[i] = vi
    return v, True


@njit(parallel=True, cache=False)
def _asls_batch(Y, p, lam, max_iters, weight_tol):
    n_slices, n = Y.shape
    V = np.empty((n_slices, n))
    iters = np.zeros(n_slices, dtype=np.int64)
    converged = np.zeros(n_slices, dtype=np.bool_)
    for s in prange(n_slices):
        y = Y[s]
        offset = y.mean()
        yc = y - offset
        w = np.ones(n)
        above_prev = np.zeros(n, dtype=np.bool_)
        v = np.zeros(n)
        for it in range(max_iters):
            v, ok = _solve_whittaker(w, lam, w * yc)
            if not ok:
                iters[s] = -1
                break
            flips = 0
            for i in range(n):
                above = yc[i] > v[i]
                if it > 0 and above != above_prev[i]:
                    flips += 1
                above_prev[i] = above
                w[i] = p if above else 1.0 - p
            iters[s] = it + 1
            if it > 0 and flips < weight_tol * n:
                converged[s] = True
                break
        for i in range(n):
            V[s, i] = v[i] + offset
    return V, iters, converged


def solve_whittaker(w: np.ndarray, lam: float, rhs: np.ndarray) -> np.ndarray:
    """Sistema pentadiagonal del suavizador; expuesto para contrastarlo con scipy."""
    v, ok = _solve_whittaker(np.ascontiguousarray(w, dtype=np.float64), float(lam),
                             np.ascontiguousarray(rhs, dtype=np.float64))
    if not ok:
        raise SingularSystemError("penalized system is not positive definite")
    return v


def fit_slices(Y: np.ndarray, cfg: BaselineConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ajusta cada fila de Y (rodajas x bins) de forma independiente."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.shape[1] < MIN_SLICE_LEN:
        raise InvalidParameterError(f"baseline slices need at least {MIN_SLICE_LEN} bins, got {Y.shape[1]}")
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError("baseline input contains NaN or Inf")
    with _KERNEL_LOCK:
        V, iters, converged = _asls_batch(Y, cfg.p, cfg.lam, cfg.max_iters, cfg.weight_tol)
    if np.any(iters < 0):
        raise SingularSystemError(f"penalized system singular for lambda={cfg.lam} and {Y.shape[1]} bins")
    return V, iters, converged


def fit_baseline_slice(column: np.ndarray, cfg: Optional[BaselineConfig] = None) -> Tuple[np.ndarray, int, bool]:
    """Ajuste asimétrico de una sola columna en log-potencia."""
    cfg = cfg or BaselineConfig()
    V, iters, converged = fit_slices(np.asarray(column, dtype=np.float64)[None, :], cfg)
    return V[0], int(iters[0]), bool(converged[0])


# --- Pre-énfasis y estimación ---

def emphasis_term(freq_axis_hz: np.ndarray, alpha: float) -> np.ndarray:
    """10*alpha*log10(f/f_ref) con f_ref el primer bin no nulo; cero en DC."""
    term = np.zeros(freq_axis_hz.size)
    if alpha != 0:
        term[1:] = 10.0 * alpha * np.log10(freq_axis_hz[1:] / freq_axis_hz[1])
    return term


def pre_emphasize(spec: Spectrogram, alpha: float) -> Spectrogram:
    require_kind(spec, SpectrogramKind.LOG_POWER)
    term = emphasis_term(spec.freq_axis_hz, alpha)
    return spec.with_values(spec.values + term[:, None], SpectrogramKind.LOG_POWER,
                            guard_bins=max(spec.guard_bins, 1))


def guard_bin_count(freq_axis_hz: np.ndarray, guard_khz: float) -> int:
    return max(1, int(np.count_nonzero(freq_axis_hz < guard_khz * 1000.0)))


def robust_scale(residual: np.ndarray, axis: int = 0) -> np.ndarray:
    center = np.median(residual, axis=axis, keepdims=True)
    return MAD_TO_STD * np.median(np.abs(residual - center), axis=axis)


def _recenter_offsets(residual: np.ndarray) -> np.ndarray:
    med = np.median(residual, axis=0)
    scale = robust_scale(residual)
    keep = residual <= med + RECENTER_CLIP * scale
    return np.sum(np.where(keep, residual, 0.0), axis=0) / np.maximum(keep.sum(axis=0), 1)


def _fit_emphasized(values: np.ndarray, freq_axis_hz: np.ndarray, exponent: np.ndarray, first: int,
                    cfg: BaselineConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ajuste con un exponente de pre-énfasis por trama; devuelve también el término aplicado (bins x tramas)."""
    term = emphasis_term(freq_axis_hz, 1.0)[:, None] * exponent[None, :]
    fitted, iters, converged = fit_slices((values + term)[first:].T, cfg)
    return fitted, iters, converged, term


def _log_slope(fitted: np.ndarray, freq_axis_hz: np.ndarray, first: int, start: int) -> Optional[np.ndarray]:
    """Pendiente por rodaja (dB por década) del ajuste frente a log10(f), desde el bin `start`."""
    x = emphasis_term(freq_axis_hz, 1.0)[start:] / 10.0
    x = x - x.mean()
    denom = float(x @ x)
    if not denom > 0:
        return None
    return fitted[:, start - first:] @ x / denom


def estimate_baseline(spec: Spectrogram, cfg: Optional[BaselineConfig] = None) -> BaselineModel:
    """
    Línea base por rodaja temporal, devuelta en el dominio original (sin
    pre-énfasis), con la escala robusta (MAD) del residuo por trama.

    Tras el primer ajuste con `alpha`, cada pasada de `tilt_passes` mide la
    pendiente en log10(f) que queda en el ajuste enfatizado de cada rodaja y
    la suma al exponente de esa rodaja, de modo que el suavizador trabaja sobre
    un espectro casi plano aunque chi no coincida con alpha (ni sea constante
    en el tiempo). El término que se suma se resta después exactamente.
    """
    cfg = cfg or BaselineConfig()
    require_kind(spec, SpectrogramKind.LOG_POWER)
    if spec.n_frames < 1:
        raise InvalidParameterError("baseline estimation needs at least one frame")
    if not np.all(np.isfinite(spec.values)):
        raise NonFiniteError(f"channel {spec.channel_id}: log-power contains NaN or Inf")

    first = 1 if cfg.exclude_dc else 0
    guard = guard_bin_count(spec.freq_axis_hz, cfg.guard_khz)
    exponent = np.full(spec.n_frames, cfg.alpha)
    fitted, iters, converged, term = _fit_emphasized(spec.values, spec.freq_axis_hz, exponent, first, cfg)
    for _ in range(cfg.tilt_passes):
        tilt = _log_slope(fitted, spec.freq_axis_hz, first, max(guard, first))
        if tilt is None:
            break
        exponent = exponent - tilt / 10.0
        fitted, iters, converged, term = _fit_emphasized(spec.values, spec.freq_axis_hz, exponent, first, cfg)

    baseline = np.empty_like(spec.values)
    baseline[first:] = fitted.T
    if first:
        baseline[0] = spec.values[0] + term[0]
    baseline -= term

    if cfg.recenter:
        baseline += _recenter_offsets(spec.values[guard:] - baseline[guard:])[None, :]
    if cfg.level_median_frames > 1 and spec.n_frames > 1:
        level = baseline[guard:].mean(axis=0)
        steady = ndimage.median_filter(level, size=cfg.level_median_frames, mode="nearest")
        baseline += (steady - level)[None, :]

    scale = robust_scale(spec.values[guard:] - baseline[guard:])
    scale = np.where(scale > 0, scale, 1.0)

    missed = int(np.count_nonzero(~converged))
    if missed:
        logger.warning(f"{spec.channel_id}: {missed} of {converged.size} baseline slices hit max_iters={cfg.max_iters}")
    return BaselineModel(
        baseline=baseline,
        residual_scale=scale,
        iters_used=iters,
        converged=converged,
        guard_bins=guard,
    )


# --- Blanqueo ---

def _check_model(spec: Spectrogram, model: BaselineModel) -> None:
    if model.baseline.shape != spec.shape:
        raise DimMismatchError(model.baseline.shape, spec.shape, what="baseline")


def whiten(spec: Spectrogram, model: BaselineModel) -> Spectrogram:
    """W(t,f) = (P - V) / escala[t]; la banda de guarda queda marcada en guard_bins."""
    require_kind(spec, SpectrogramKind.LOG_POWER)
    _check_model(spec, model)
    values = (spec.values - model.baseline) / model.residual_scale[None, :]
    return spec.with_values(values, SpectrogramKind.WHITENED, guard_bins=max(spec.guard_bins, model.guard_bins))


def whiten_complex(spec: Spectrogram, model: BaselineModel) -> Spectrogram:
    """Quita la línea base de la magnitud sin tocar la fase."""
    require_kind(spec, SpectrogramKind.COMPLEX)
    _check_model(spec, model)
    values = spec.values * 10.0 ** (-model.baseline / 20.0)
    return spec.with_values(values, SpectrogramKind.COMPLEX, guard_bins=max(spec.guard_bins, model.guard_bins))
