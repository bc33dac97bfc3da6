import logging
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np

from .errors import BlockTooLargeError, DimMismatchError, InvalidParameterError, NeedTwoChannelsError
from .tfa import Spectrogram, SpectrogramKind, require_kind

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CpsEstimate:
    cross_power: np.ndarray
    coherence: np.ndarray
    segments_per_block: int
    channel_pair: Tuple[str, str]


class Denoiser(Protocol):
    """Estimador multicanal: recibe la pila compleja y devuelve el canal objetivo con las mismas dimensiones."""

    def __call__(self, stack: Sequence[Spectrogram], target: int) -> Spectrogram:
        ...


# --- Espectro de potencia cruzada ---

def _check_pair(a: Spectrogram, b: Spectrogram) -> None:
    require_kind(a, SpectrogramKind.COMPLEX)
    require_kind(b, SpectrogramKind.COMPLEX)
    if a.shape != b.shape:
        raise DimMismatchError(a.shape, b.shape)
    if not (np.array_equal(a.freq_axis_hz, b.freq_axis_hz) and np.array_equal(a.time_axis_ms, b.time_axis_ms)):
        raise DimMismatchError(a.shape, b.shape, what=f"axes of {a.channel_id} and {b.channel_id}")


def _blocks(values: np.ndarray, block: int) -> np.ndarray:
    n_blocks = values.shape[1] // block
    return values[:, : n_blocks * block].reshape(values.shape[0], n_blocks, block)


def cross_power(spec_a: Spectrogram, spec_b: Spectrogram, block: int) -> CpsEstimate:
    """
    Promedio por bloques de M tramas de Z_a * conj(Z_b) y coherencia
    |S_ab|^2 / (S_aa * S_bb). El bloque parcial final se descarta.
    """
    _check_pair(spec_a, spec_b)
    if block < 1:
        raise InvalidParameterError(f"block must be >= 1, got {block}")
    if block > spec_a.n_frames:
        raise BlockTooLargeError(block, spec_a.n_frames)

    za, zb = _blocks(spec_a.values, block), _blocks(spec_b.values, block)
    ar, ai, br, bi = za.real, za.imag, zb.real, zb.imag
    # (Ra Rb + Ia Ib) + i (Ia Rb - Ra Ib), en reales para que S_ba == conj(S_ab) exacto
    re = np.mean(ar * br + ai * bi, axis=2)
    im = np.mean(ai * br - ar * bi, axis=2)
    auto_a = np.mean(ar * ar + ai * ai, axis=2)
    auto_b = np.mean(br * br + bi * bi, axis=2)

    denom = auto_a * auto_b
    with np.errstate(divide="ignore", invalid="ignore"):
        coherence = np.where(denom > 0, (re * re + im * im) / denom, 0.0)
    return CpsEstimate(
        cross_power=re + 1j * im,
        coherence=np.clip(coherence, 0.0, 1.0),
        segments_per_block=block,
        channel_pair=(spec_a.channel_id, spec_b.channel_id),
    )


def expand_blocks(blockwise: np.ndarray, block: int, n_frames: int) -> np.ndarray:
    """Lleva una matriz por bloques a tramas; las tramas sobrantes usan el último bloque."""
    frames = np.repeat(blockwise, block, axis=1)
    if frames.shape[1] < n_frames:
        tail = np.repeat(blockwise[:, -1:], n_frames - frames.shape[1], axis=1)
        frames = np.concatenate([frames, tail], axis=1)
    return frames[:, :n_frames]


def median_gain(coherences: Sequence[np.ndarray]) -> np.ndarray:
    """Ganancia por bloques: mediana de las coherencias con los demás canales, en [0,1]."""
    return np.clip(np.median(np.stack(coherences), axis=0), 0.0, 1.0)


def apply_gain(target: Spectrogram, gain: np.ndarray, block: int) -> Spectrogram:
    frames = expand_blocks(gain, block, target.n_frames)
    return target.with_values(target.values * frames, SpectrogramKind.COMPLEX)


def _check_stack(stack: Sequence[Spectrogram]) -> None:
    if len(stack) < 2:
        raise NeedTwoChannelsError(f"CPS denoising needs at least 2 channels, got {len(stack)}")
    for other in stack[1:]:
        _check_pair(stack[0], other)


def cps_denoise(stack: Sequence[Spectrogram], target: int, block: int) -> Spectrogram:
    """Ganancia por coherencia (mediana sobre los demás canales); conserva la fase del objetivo."""
    _check_stack(stack)
    coherences = [
        cross_power(stack[target], other, block).coherence
        for j, other in enumerate(stack)
        if j != target
    ]
    return apply_gain(stack[target], median_gain(coherences), block)


class CpsDenoiser:
    """
    Implementación clásica del contrato Denoiser. denoise_all calcula la
    coherencia de cada par una sola vez y la reutiliza para todos los objetivos.
    """

    def __init__(self, block: int = 16):
        self.block = block

    def __call__(self, stack: Sequence[Spectrogram], target: int) -> Spectrogram:
        return cps_denoise(stack, target, self.block)

    def coherence_gains(self, stack: Sequence[Spectrogram]) -> List[np.ndarray]:
        """Ganancia por bloques de cada canal de la pila."""
        _check_stack(stack)
        pairs: Dict[Tuple[int, int], np.ndarray] = {}
        for i in range(len(stack)):
            for j in range(i + 1, len(stack)):
                pairs[(i, j)] = cross_power(stack[i], stack[j], self.block).coherence
        logger.debug(f"CPS: {len(pairs)} channel pairs, block {self.block}")
        return [
            median_gain([pairs[(min(t, j), max(t, j))] for j in range(len(stack)) if j != t])
            for t in range(len(stack))
        ]

    def denoise_all(self, stack: Sequence[Spectrogram]) -> List[Spectrogram]:
        gains = self.coherence_gains(stack)
        return [apply_gain(spec, gain, self.block) for spec, gain in zip(stack, gains)]


# --- Métrica de variación total ---

def total_variation(spec: Spectrogram) -> float:
    """TV isótropa normalizada por número de elementos (diferencias hacia delante, borde replicado)."""
    require_kind(spec, SpectrogramKind.WHITENED, SpectrogramKind.LOG_POWER)
    x = np.asarray(spec.values, dtype=np.float64)
    d_t = np.diff(x, axis=1, append=x[:, -1:])
    d_f = np.diff(x, axis=0, append=x[-1:, :])
    return float(np.sum(np.sqrt(d_t * d_t + d_f * d_f)) / x.size)
