import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, signal

from .config import StftConfig
from .errors import DimMismatchError, KindMismatchError, SeriesTooShortError
from .ingest import ChannelSeries

logger = logging.getLogger(__name__)

POWER_FLOOR = 1e-20
# tramas procesadas por bloque en la STFT (acota memoria en disparos largos)
FRAMES_PER_CHUNK = 4096


class SpectrogramKind(str, Enum):
    COMPLEX = "complex"
    POWER = "power"
    LOG_POWER = "log_power"
    WHITENED = "whitened"
    MASK = "mask"
    LABELS = "labels"


REAL_KINDS = (
    SpectrogramKind.POWER,
    SpectrogramKind.LOG_POWER,
    SpectrogramKind.WHITENED,
    SpectrogramKind.MASK,
    SpectrogramKind.LABELS,
)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """
    Matriz tiempo-frecuencia (bins x tramas) con su calibración de ejes.
    `guard_bins` marca los primeros bins de frecuencia como banda de guarda.
    """
    values: np.ndarray
    kind: SpectrogramKind
    freq_axis_hz: np.ndarray
    time_axis_ms: np.ndarray
    window_len: int
    hop: int
    sample_rate_hz: float
    guard_bins: int = 0
    channel_id: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        expected = (self.freq_axis_hz.size, self.time_axis_ms.size)
        if self.values.shape != expected:
            raise DimMismatchError(expected, self.values.shape, what="spectrogram values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_freqs(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def in_band(self) -> np.ndarray:
        """Filas fuera de la banda de guarda."""
        return np.arange(self.n_freqs) >= self.guard_bins

    @property
    def frame_step_ms(self) -> float:
        return self.hop / self.sample_rate_hz * 1000.0

    def with_values(self, values: np.ndarray, kind: SpectrogramKind, **changes) -> "Spectrogram":
        return replace(self, values=values, kind=kind, **changes)


def require_kind(spec: Spectrogram, *kinds: SpectrogramKind) -> None:
    if spec.kind not in kinds:
        raise KindMismatchError(kinds, spec.kind)


def require_same_dims(a: Spectrogram, b: Spectrogram) -> None:
    if a.shape != b.shape:
        raise DimMismatchError(a.shape, b.shape)


def frequency_axis(window_len: int, sample_rate_hz: float) -> np.ndarray:
    return np.arange(window_len // 2 + 1) * sample_rate_hz / window_len


def time_axis(n_frames: int, window_len: int, hop: int, sample_rate_hz: float, t0_ms: float = 0.0) -> np.ndarray:
    """Centros de trama en milisegundos."""
    return t0_ms + (np.arange(n_frames) * hop + window_len / 2) / sample_rate_hz * 1000.0


def analysis_window(cfg: StftConfig) -> np.ndarray:
    # ventana periódica, la que corresponde a un análisis con DFT
    return signal.get_window(cfg.window.value, cfg.window_len, fftbins=True)


# --- Transformadas ---

def stft(series: ChannelSeries, cfg: Optional[StftConfig] = None, workers: Optional[int] = None) -> Spectrogram:
    """STFT unilateral: la trama t cubre las muestras [t*hop, t*hop + N); se descarta la trama parcial final."""
    cfg = cfg or StftConfig()
    n, hop = cfg.window_len, cfg.hop
    x = series.samples
    if x.size < n:
        raise SeriesTooShortError(x.size, n, what=f"channel {series.channel_id}")

    frames = sliding_window_view(x, n)[::hop]
    window = analysis_window(cfg)
    values = np.empty((n // 2 + 1, frames.shape[0]), dtype=np.complex128)
    for start in range(0, frames.shape[0], FRAMES_PER_CHUNK):
        chunk = frames[start:start + FRAMES_PER_CHUNK] * window
        values[:, start:start + chunk.shape[0]] = fft.rfft(chunk, axis=1, workers=workers).T

    logger.debug(f"STFT {series.channel_id}: {values.shape[0]} bins x {values.shape[1]} frames, hop {hop}")
    return Spectrogram(
        values=values,
        kind=SpectrogramKind.COMPLEX,
        freq_axis_hz=frequency_axis(n, series.sample_rate_hz),
        time_axis_ms=time_axis(values.shape[1], n, hop, series.sample_rate_hz, series.t0_ms),
        window_len=n,
        hop=hop,
        sample_rate_hz=series.sample_rate_hz,
        channel_id=series.channel_id,
        meta={"shot_id": series.shot_id, "t0_ms": series.t0_ms},
    )


def power(spec: Spectrogram) -> Spectrogram:
    require_kind(spec, SpectrogramKind.COMPLEX)
    z = spec.values
    return spec.with_values(z.real ** 2 + z.imag ** 2, SpectrogramKind.POWER)


def log_power(spec: Spectrogram) -> Spectrogram:
    """10*log10(|Z|^2 + 1e-20), en dB."""
    require_kind(spec, SpectrogramKind.COMPLEX)
    z = spec.values
    return spec.with_values(10.0 * np.log10(z.real ** 2 + z.imag ** 2 + POWER_FLOOR), SpectrogramKind.LOG_POWER)


def welch(spec: Spectrogram) -> np.ndarray:
    """Periodograma de Welch: potencia media por bin a lo largo de las tramas."""
    require_kind(spec, SpectrogramKind.COMPLEX)
    z = spec.values
    return np.mean(z.real ** 2 + z.imag ** 2, axis=1)
