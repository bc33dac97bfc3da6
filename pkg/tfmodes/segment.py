import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import ndimage

from .errors import DimMismatchError, OutputError
from .tfa import POWER_FLOOR, Spectrogram, SpectrogramKind, require_kind, require_same_dims

logger = logging.getLogger(__name__)

MAD_TO_STD = 1.4826
PERSISTENCE_QUORUM = 0.5
_ROW = np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=bool)
_COLUMN = np.ones((3, 1), dtype=bool)
PathLike = Union[str, Path]


# --- Modelos (esquema de la base de regiones) ---

class RegionKind(str, Enum):
    COHERENT = "coherent"
    TRANSIENT = "transient"


class RegionRecord(BaseModel):
    label: int
    kind: RegionKind = RegionKind.COHERENT
    f_min_khz: float
    f_max_khz: float
    t_min_ms: float
    t_max_ms: float
    amplitude: float = 0.0
    amplitude_db: float = -200.0
    pixel_count: int


CSV_COLUMNS = list(RegionRecord.model_fields)
CSV_DTYPES = {
    "label": "int64", "kind": "object", "f_min_khz": "float64", "f_max_khz": "float64",
    "t_min_ms": "float64", "t_max_ms": "float64", "amplitude": "float64",
    "amplitude_db": "float64", "pixel_count": "int64",
}


@dataclass(frozen=True, eq=False)
class RegionGeometry:
    """Componente conexa: índices de sus píxeles (fila = bin, columna = trama)."""
    label: int
    rows: np.ndarray
    cols: np.ndarray
    f_min_khz: float
    f_max_khz: float
    t_min_ms: float
    t_max_ms: float

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)

    @property
    def sort_key(self) -> Tuple[int, int, int, int]:
        # primer píxel en orden de barrido, desempate final
        first = int(np.min(self.rows.astype(np.int64) * (1 << 32) + self.cols))
        return (-self.pixel_count, int(self.cols.min()), int(self.rows.min()), first)

    def as_record(self) -> RegionRecord:
        return RegionRecord(
            label=self.label,
            f_min_khz=self.f_min_khz,
            f_max_khz=self.f_max_khz,
            t_min_ms=self.t_min_ms,
            t_max_ms=self.t_max_ms,
            pixel_count=self.pixel_count,
        )


@dataclass(frozen=True, eq=False)
class TransientProfile:
    column_score: np.ndarray
    flagged_frames: np.ndarray
    score_threshold: float
    coverage: np.ndarray

    @property
    def flags(self) -> np.ndarray:
        out = np.zeros(self.column_score.size, dtype=bool)
        out[self.flagged_frames] = True
        return out


# --- Transitorios de banda ancha ---

def flag_transients(
    whitened: Spectrogram,
    mask: Spectrogram,
    k_mad: float = 5.0,
    coverage_fraction: float = 0.3,
) -> TransientProfile:
    """
    Marca tramas cuyo impulso medio (media del blanqueado en banda) supera
    mediana + k_mad escalas MAD y cuya máscara cubre al menos `coverage_fraction`
    de los bins en banda.
    """
    require_kind(whitened, SpectrogramKind.WHITENED)
    require_kind(mask, SpectrogramKind.MASK)
    require_same_dims(whitened, mask)
    band = np.arange(whitened.n_freqs) >= max(whitened.guard_bins, mask.guard_bins)

    score = whitened.values[band].mean(axis=0)
    center = float(np.median(score))
    spread = MAD_TO_STD * float(np.median(np.abs(score - center)))
    threshold = center + k_mad * spread
    coverage = (mask.values[band] != 0).mean(axis=0)

    flagged = np.flatnonzero((score > threshold) & (coverage >= coverage_fraction))
    if flagged.size:
        logger.info(f"{whitened.channel_id}: {flagged.size} transient frames flagged")
    return TransientProfile(
        column_score=score,
        flagged_frames=flagged,
        score_threshold=threshold,
        coverage=coverage,
    )


def _flag_runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], flags.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def exclusion_frames(flags: np.ndarray, block: int = 1, pad: int = 0) -> np.ndarray:
    """
    Tramas contaminadas por los transitorios: las marcadas, ensanchadas `pad`
    tramas (media ventana) y extendidas a bloques completos de `block` tramas.
    Las tramas de cola comparten el último bloque completo, igual que la ganancia CPS.
    """
    near = np.asarray(flags, dtype=bool)
    if pad > 0 and near.any():
        near = ndimage.binary_dilation(near, iterations=pad)
    if block <= 1 or not near.any():
        return near.copy()
    owner = np.minimum(np.arange(near.size) // block, max(near.size // block - 1, 0))
    touched = np.zeros(int(owner[-1]) + 1, dtype=bool)
    touched[owner[near]] = True
    return touched[owner]


def _density(active: np.ndarray, frames: int) -> np.ndarray:
    size = max(1, min(frames, active.shape[1]))
    return ndimage.uniform_filter1d(active.astype(np.float64), size=size, axis=1, mode="reflect")


def fill_time_gaps(active: np.ndarray, max_gap: int) -> np.ndarray:
    """Rellena huecos de hasta `max_gap` tramas entre dos píxeles activos de la misma fila."""
    if max_gap < 1 or not active.any():
        return active.copy()
    gaps, count = ndimage.label(~active, structure=_ROW)
    sizes = np.bincount(gaps.ravel(), minlength=count + 1)
    fill = sizes <= max_gap
    fill[0] = False
    # huecos que tocan el borde del disparo no están cerrados
    fill[gaps[:, 0]] = False
    fill[gaps[:, -1]] = False
    return active | fill[gaps]


def persistent_support(
    active: np.ndarray,
    persistence_frames: int,
    onset_frames: int,
    max_gap: int,
    excluded: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Píxeles de modos persistentes. Un bin (+-1) debe estar activo en al menos
    la mitad de las `persistence_frames` tramas que lo rodean; `onset_frames`
    fija el inicio y el final con la misma regla en una ventana corta, y los
    huecos interiores de hasta `max_gap` tramas se rellenan. Las tramas
    excluidas no cuentan y quedan vacías.
    """
    valid = np.ones(active.shape[1], dtype=bool) if excluded is None else ~excluded
    out = np.zeros(active.shape, dtype=bool)
    if not valid.any():
        return out
    widened = ndimage.binary_dilation(active[:, valid], structure=_COLUMN)
    lasting = _density(widened, persistence_frames) >= PERSISTENCE_QUORUM
    onset = _density(widened, onset_frames) >= PERSISTENCE_QUORUM
    out[:, valid] = fill_time_gaps(onset & lasting, max_gap) & lasting
    return out


def split_transient_mask(
    mask: Spectrogram,
    transients: TransientProfile,
    bridge: bool = True,
    block: int = 1,
    pad: int = 0,
    persistence_frames: int = 1,
    onset_frames: int = 1,
    max_gap: int = 0,
) -> Tuple[Spectrogram, Spectrogram]:
    """
    Separa la máscara en parte coherente y parte transitoria.

    La parte transitoria son los píxeles activos de las tramas marcadas. La
    coherente excluye además las tramas vecinas (`pad`) y los bloques CPS
    (`block`) que tocan un transitorio; con `persistence_frames > 1` solo
    conserva los modos persistentes (`persistent_support`). Con `bridge`, cada
    racha excluida se cruza en los bins coherentes a ambos lados (+-1 bin) y
    esos píxeles pasan a la parte coherente.
    """
    require_kind(mask, SpectrogramKind.MASK)
    if transients.column_score.size != mask.n_frames:
        raise DimMismatchError((mask.n_frames,), (transients.column_score.size,), what="transient profile")
    flags = transients.flags
    excluded = exclusion_frames(flags, block, pad)
    active = mask.values != 0
    transient = active & flags[None, :]
    if persistence_frames > 1:
        coherent = persistent_support(active, persistence_frames, onset_frames, max_gap, excluded)
        coherent[:mask.guard_bins] = False
    else:
        coherent = active & ~excluded[None, :]

    if bridge:
        for start, stop in _flag_runs(excluded):
            if start == 0 or stop >= mask.n_frames:
                continue
            left, right = coherent[:, start - 1], coherent[:, stop]
            rows = (left | right) & ndimage.binary_dilation(left) & ndimage.binary_dilation(right)
            coherent[rows, start:stop] = True
            transient[rows, start:stop] = False

    return (
        mask.with_values(coherent.astype(np.uint8), SpectrogramKind.MASK),
        mask.with_values(transient.astype(np.uint8), SpectrogramKind.MASK),
    )


# --- Etiquetado ---

def _components(active: np.ndarray, connectivity: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, count = ndimage.label(active, structure=structure)
    flat = np.flatnonzero(labels)
    owners = labels.ravel()[flat]
    order = np.argsort(owners, kind="stable")
    groups = np.split(flat[order], np.cumsum(np.bincount(owners, minlength=count + 1)[1:])[:-1])
    return [np.divmod(g, active.shape[1]) for g in groups if g.size]


def relabel(regions: Sequence[RegionGeometry], first_label: int = 1) -> List[RegionGeometry]:
    """Etiquetas por pixel_count decreciente; empates por (t_min, f_min)."""
    ordered = sorted(regions, key=lambda r: r.sort_key)
    return [
        RegionGeometry(
            label=first_label + i,
            rows=r.rows,
            cols=r.cols,
            f_min_khz=r.f_min_khz,
            f_max_khz=r.f_max_khz,
            t_min_ms=r.t_min_ms,
            t_max_ms=r.t_max_ms,
        )
        for i, r in enumerate(ordered)
    ]


def label_regions(
    mask: Spectrogram, connectivity: int = 8, min_region_pixels: int = 12
) -> List[RegionGeometry]:
    require_kind(mask, SpectrogramKind.MASK)
    freq_khz = mask.freq_axis_hz / 1000.0
    regions = []
    discarded = 0
    for rows, cols in _components(mask.values != 0, connectivity):
        if rows.size < min_region_pixels:
            discarded += rows.size
            continue
        regions.append(RegionGeometry(
            label=0,
            rows=rows,
            cols=cols,
            f_min_khz=float(freq_khz[rows.min()]),
            f_max_khz=float(freq_khz[rows.max()]),
            t_min_ms=float(mask.time_axis_ms[cols.min()]),
            t_max_ms=float(mask.time_axis_ms[cols.max()]),
        ))
    logger.debug(f"{mask.channel_id}: {len(regions)} regions kept, {discarded} pixels below min size")
    return relabel(regions)


def label_image(regions: Iterable[RegionGeometry], shape: Tuple[int, int]) -> np.ndarray:
    image = np.zeros(shape, dtype=np.int32)
    for region in regions:
        image[region.rows, region.cols] = region.label
    return image


# --- Medida y compuerta ---

def measure_regions(
    regions: Sequence[RegionGeometry],
    power: Spectrogram,
    transients: TransientProfile,
    transient_fraction: float = 0.5,
) -> List[RegionRecord]:
    """Amplitud = suma de potencia lineal original sobre los píxeles de la región."""
    require_kind(power, SpectrogramKind.POWER)
    if transients.column_score.size != power.n_frames:
        raise DimMismatchError((power.n_frames,), (transients.column_score.size,), what="transient profile")
    flags = transients.flags
    records = []
    for region in regions:
        if region.pixel_count and (region.rows.max() >= power.n_freqs or region.cols.max() >= power.n_frames):
            raise DimMismatchError(power.shape, (int(region.rows.max()) + 1, int(region.cols.max()) + 1),
                                   what=f"region {region.label}")
        amplitude = float(np.sum(power.values[region.rows, region.cols]))
        frames = np.unique(region.cols)
        flagged_share = float(flags[frames].mean()) if frames.size else 0.0
        kind = RegionKind.TRANSIENT if flagged_share >= transient_fraction else RegionKind.COHERENT
        records.append(region.as_record().model_copy(update={
            "kind": kind,
            "amplitude": amplitude,
            "amplitude_db": float(10.0 * np.log10(amplitude + POWER_FLOOR)),
        }))
    return records


def gate_spectrogram(power: Spectrogram, mask: Spectrogram) -> Spectrogram:
    require_kind(power, SpectrogramKind.POWER)
    require_same_dims(power, mask)
    return power.with_values(np.where(mask.values != 0, power.values, 0.0), SpectrogramKind.POWER)


def gate_coherent(power: Spectrogram, mask: Spectrogram, transients: TransientProfile) -> Spectrogram:
    """Compuerta con las tramas transitorias anuladas: solo amplitudes coherentes."""
    gated = gate_spectrogram(power, mask)
    values = gated.values.copy()
    values[:, transients.flags] = 0.0
    return gated.with_values(values, SpectrogramKind.POWER)


# --- Base de datos de regiones (CSV / JSONL) ---

def regions_frame(records: Sequence[RegionRecord]) -> pd.DataFrame:
    rows = [r.model_dump(mode="json") for r in records]
    return pd.DataFrame(rows, columns=CSV_COLUMNS).astype(CSV_DTYPES)


def write_regions_csv(records: Sequence[RegionRecord], path: PathLike) -> None:
    try:
        regions_frame(records).to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def read_regions_csv(path: PathLike) -> List[RegionRecord]:
    frame = pd.read_csv(path, dtype=CSV_DTYPES)
    if frame.empty:
        return []
    rows = json.loads(frame.to_json(orient="records", double_precision=15))
    return [RegionRecord.model_validate(row) for row in rows]


def write_regions_jsonl(records: Sequence[RegionRecord], path: PathLike) -> None:
    try:
        Path(path).write_text("".join(r.model_dump_json() + "\n" for r in records), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def read_regions_jsonl(path: PathLike) -> List[RegionRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [RegionRecord.model_validate_json(line) for line in lines if line.strip()]


def band_summary(records: Sequence[RegionRecord], edges_khz: Sequence[float] = (0.0, 50.0, 250.0)) -> pd.DataFrame:
    """Regiones coherentes y amplitud total por banda (asignadas por su frecuencia central)."""
    edges = [float(e) for e in edges_khz]
    names = [f"{a:g}-{b:g}" for a, b in zip(edges, edges[1:])]
    frame = regions_frame([r for r in records if r.kind == RegionKind.COHERENT])
    center = np.minimum((frame["f_min_khz"] + frame["f_max_khz"]) / 2.0, np.nextafter(edges[-1], -np.inf))
    frame["band"] = pd.cut(center, bins=edges, right=False, labels=names)
    summary = (
        frame.groupby("band", observed=False)
        .agg(n_regions=("label", "count"), amplitude=("amplitude", "sum"))
        .reindex(names, fill_value=0)
        .reset_index()
    )
    summary.insert(1, "f_lo_khz", edges[:-1])
    summary.insert(2, "f_hi_khz", edges[1:])
    summary["amplitude_db"] = 10.0 * np.log10(summary["amplitude"].astype(float) + POWER_FLOOR)
    return summary
