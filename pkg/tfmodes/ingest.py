import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy import signal

from .config import DecimationConfig
from .errors import (
    CorruptSamplesError,
    MissingMetadataError,
    NonIntegerFactorError,
    SeriesTooShortError,
    UnsupportedEncodingError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SUPPORTED_ENCODINGS = {"float32le": "<f4"}


# --- Tipos de dominio ---

@dataclass(frozen=True, eq=False)
class ChannelSeries:
    samples: np.ndarray
    sample_rate_hz: float
    t0_ms: float
    channel_id: str
    shot_id: str
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise MissingMetadataError(f"channel {self.channel_id}: sample_rate_hz must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise CorruptSamplesError(f"channel {self.channel_id}: samples must be a non-empty 1-D sequence")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class DecimationPlan:
    input_rate_hz: float
    output_rate_hz: float
    factor: int
    filter_order: int = 8
    ripple_db: float = 0.05
    cutoff_fraction: float = 0.8

    @property
    def padlen(self) -> int:
        return 3 * self.filter_order


class ChannelSidecar(BaseModel):
    """Metadatos JSON que acompanan a cada fichero de muestras."""
    model_config = ConfigDict(extra="allow")

    sample_rate_hz: float
    t0_ms: float
    channel_id: str
    shot_id: str
    n_samples: Optional[int] = None
    encoding: str = "float32le"


class ManifestEntry(BaseModel):
    data: str
    sidecar: str


class ShotManifest(BaseModel):
    shot_id: Optional[str] = None
    channels: List[ManifestEntry]


# --- Lectura ---

def read_sidecar(sidecar: PathLike) -> ChannelSidecar:
    sidecar = Path(sidecar)
    if not sidecar.is_file():
        raise MissingMetadataError(f"sidecar {sidecar} not found")
    try:
        meta = ChannelSidecar.model_validate(json.loads(sidecar.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise MissingMetadataError(f"sidecar {sidecar} is incomplete: {e}") from e
    if meta.sample_rate_hz <= 0:
        raise MissingMetadataError(f"sidecar {sidecar}: sample_rate_hz must be positive")
    return meta


def load_channel(path: PathLike, sidecar: PathLike) -> ChannelSeries:
    """Lee un canal float32 little-endian y valida sus metadatos."""
    meta = read_sidecar(sidecar)
    dtype = SUPPORTED_ENCODINGS.get(meta.encoding)
    if dtype is None:
        raise UnsupportedEncodingError(f"encoding {meta.encoding!r} is not supported")

    path = Path(path)
    if not path.is_file():
        raise CorruptSamplesError(f"sample file {path} not found")
    size = path.stat().st_size
    if size % np.dtype(dtype).itemsize:
        raise CorruptSamplesError(f"{path}: {size} bytes is not a whole number of samples")
    samples = np.fromfile(path, dtype=dtype)
    if samples.size == 0:
        raise CorruptSamplesError(f"{path}: no samples")
    if meta.n_samples is not None and meta.n_samples != samples.size:
        raise CorruptSamplesError(
            f"{path}: sidecar declares {meta.n_samples} samples, file holds {samples.size}"
        )
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise CorruptSamplesError(f"{path}: non-finite sample at index {bad[0]}", index=int(bad[0]))

    logger.debug(f"Loaded {meta.channel_id}: {samples.size} samples @ {meta.sample_rate_hz} Hz")
    return ChannelSeries(
        samples=samples.astype(np.float64),
        sample_rate_hz=float(meta.sample_rate_hz),
        t0_ms=float(meta.t0_ms),
        channel_id=meta.channel_id,
        shot_id=meta.shot_id,
        extra=dict(meta.model_extra or {}),
    )


def save_channel(series: ChannelSeries, path: PathLike, sidecar: PathLike) -> None:
    """Escribe un canal en el mismo formato que lee load_channel."""
    series.samples.astype("<f4").tofile(path)
    meta = {
        "sample_rate_hz": series.sample_rate_hz,
        "t0_ms": series.t0_ms,
        "channel_id": series.channel_id,
        "shot_id": series.shot_id,
        "n_samples": int(series.samples.size),
        "encoding": "float32le",
        **series.extra,
    }
    Path(sidecar).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_manifest(path: PathLike) -> ShotManifest:
    """Lee el manifiesto de un disparo; las rutas relativas se resuelven respecto a su directorio."""
    path = Path(path)
    if not path.is_file():
        raise MissingMetadataError(f"manifest {path} not found")
    try:
        manifest = ShotManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise MissingMetadataError(f"manifest {path} is invalid: {e}") from e
    base = path.parent
    channels = [
        ManifestEntry(data=str(base / entry.data), sidecar=str(base / entry.sidecar))
        for entry in manifest.channels
    ]
    return ShotManifest(shot_id=manifest.shot_id, channels=channels)


# --- Decimación ---

def plan_decimation(
    input_rate_hz: float, output_rate_hz: float, cfg: Optional[DecimationConfig] = None
) -> DecimationPlan:
    cfg = cfg or DecimationConfig()
    factor = int(round(input_rate_hz / output_rate_hz))
    if factor < 1 or abs(input_rate_hz / factor - output_rate_hz) / output_rate_hz >= 1e-9:
        raise NonIntegerFactorError(input_rate_hz, output_rate_hz)
    return DecimationPlan(
        input_rate_hz=float(input_rate_hz),
        output_rate_hz=float(output_rate_hz),
        factor=factor,
        filter_order=cfg.filter_order,
        ripple_db=cfg.ripple_db,
        cutoff_fraction=cfg.cutoff_fraction,
    )


def antialias_sos(plan: DecimationPlan) -> np.ndarray:
    """
    Paso bajo Chebyshev tipo I en secciones de segundo orden. La ganancia se
    eleva medio rizado para que la banda de paso oscile alrededor de 1.
    """
    sos = signal.cheby1(
        plan.filter_order, plan.ripple_db, plan.cutoff_fraction / plan.factor, output="sos"
    )
    sos[0, :3] *= 10.0 ** (plan.ripple_db / 40.0)
    return sos


def decimate(
    series: ChannelSeries, target_rate_hz: float, cfg: Optional[DecimationConfig] = None
) -> ChannelSeries:
    """Decimación por factor entero con filtrado ida y vuelta (fase cero)."""
    plan = plan_decimation(series.sample_rate_hz, target_rate_hz, cfg)
    if plan.factor == 1:
        return series
    if series.samples.size <= plan.padlen:
        raise SeriesTooShortError(series.samples.size, plan.padlen + 1, what=f"channel {series.channel_id}")

    filtered = signal.sosfiltfilt(
        antialias_sos(plan), series.samples, padtype="odd", padlen=plan.padlen
    )
    logger.debug(
        f"Decimated {series.channel_id} by {plan.factor}: "
        f"{series.sample_rate_hz:g} Hz -> {plan.output_rate_hz:g} Hz"
    )
    return replace(
        series,
        samples=np.ascontiguousarray(filtered[:: plan.factor]),
        sample_rate_hz=plan.output_rate_hz,
    )


def require_length(series: ChannelSeries, window_len: int) -> ChannelSeries:
    """Una serie utilizable cubre al menos dos ventanas STFT."""
    if series.samples.size < 2 * window_len:
        raise SeriesTooShortError(series.samples.size, 2 * window_len, what=f"channel {series.channel_id}")
    return series
