"""
Pipeline completo por disparo:

    decimate -> stft -> log_power -> estimate_baseline -> whiten -> (cps_denoise)
    -> knee_threshold -> apply_threshold -> flag_transients -> label_regions
    -> measure_regions -> salidas (CSV, JSONL, PNG, contenedor, SQLite)

Los canales se procesan en un pool de hilos; el orden de resultados se fija
por channel_id para que las salidas sean reproducibles.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import matplotlib
import numba
import numpy as np
import pandas as pd
import pydantic
import scipy
from sqlalchemy.orm import Session

from . import __version__
from .baseline import BaselineModel, estimate_baseline, whiten, whiten_complex
from .config import DEFAULT_THREADS, DenoiseMethod, OutputFormat, PipelineConfig
from .container import write_container
from .database import make_engine, store_regions
from .denoise import CpsDenoiser, apply_gain, total_variation
from .errors import DegenerateDistributionError, TfModesError
from .ingest import (
    ChannelSeries,
    ManifestEntry,
    decimate,
    load_channel,
    load_manifest,
    plan_decimation,
    read_sidecar,
    require_length,
)
from .render import RenderStyle, render
from .segment import (
    RegionGeometry,
    RegionKind,
    RegionRecord,
    band_summary,
    flag_transients,
    gate_spectrogram,
    label_image,
    label_regions,
    measure_regions,
    relabel,
    split_transient_mask,
    write_regions_csv,
    write_regions_jsonl,
)
from .tfa import Spectrogram, SpectrogramKind, log_power, power, stft
from .threshold import KneeReport, apply_threshold, knee_threshold

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ChannelStatus(str, Enum):
    OK = "ok"
    DEGRADED = "degraded"
    FAILED = "failed"


@dataclass
class ChannelAnalysis:
    """Resultado de las etapas por canal previas al denoising."""
    series: ChannelSeries
    decimation_factor: int
    spectrum: Spectrogram
    power: Spectrogram
    log_power: Spectrogram
    model: BaselineModel
    whitened: Spectrogram
    whitened_complex: Spectrogram


@dataclass
class ChannelOutcome:
    channel_id: str
    status: ChannelStatus = ChannelStatus.OK
    error: Optional[str] = None
    records: List[RegionRecord] = field(default_factory=list)
    knee: Optional[KneeReport] = None
    transient_frames: List[int] = field(default_factory=list)
    decimation_factor: Optional[int] = None
    dims: Optional[List[int]] = None
    unconverged_slices: int = 0
    total_variation: Optional[Dict[str, float]] = None
    artifacts: List[str] = field(default_factory=list)
    # claves del sidecar que no forman parte del esquema
    extra: Dict[str, Any] = field(default_factory=dict)
    gain: Optional[np.ndarray] = None
    # vistas intermedias para quien llame como biblioteca; no se serializan
    mask: Optional[Spectrogram] = None
    labels: Optional[Spectrogram] = None
    geometries: List[RegionGeometry] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        kinds = [r.kind for r in self.records]
        return {
            "channel_id": self.channel_id,
            "status": self.status.value,
            "error": self.error,
            "decimation_factor": self.decimation_factor,
            "dims": self.dims,
            "unconverged_slices": self.unconverged_slices,
            "knee": self.knee.model_dump() if self.knee else None,
            "total_variation": self.total_variation,
            "transient_frames": self.transient_frames,
            "n_regions": len(self.records),
            "n_coherent": kinds.count(RegionKind.COHERENT),
            "n_transient": kinds.count(RegionKind.TRANSIENT),
            "artifacts": self.artifacts,
            "extra": self.extra,
        }


@dataclass
class PipelineResult:
    shot_id: str
    outcomes: List[ChannelOutcome]
    warnings: List[str]
    bands: pd.DataFrame
    metadata_path: Optional[Path] = None

    @property
    def exit_status(self) -> int:
        if any(o.status == ChannelStatus.FAILED for o in self.outcomes):
            return 1
        if any(o.status == ChannelStatus.DEGRADED for o in self.outcomes):
            return 2
        return 0

    def outcome(self, channel_id: str) -> ChannelOutcome:
        return next(o for o in self.outcomes if o.channel_id == channel_id)


# --- Etapas por canal ---

def prepare_channel(entry: ManifestEntry, config: PipelineConfig) -> Tuple[ChannelSeries, int]:
    """Carga, decimación y control de longitud; devuelve también el factor aplicado."""
    series = load_channel(entry.data, entry.sidecar)
    factor = plan_decimation(series.sample_rate_hz, config.target_rate_hz, config.decimation).factor
    series = decimate(series, config.target_rate_hz, config.decimation)
    return require_length(series, config.stft.window_len), factor


def analyze_channel(series: ChannelSeries, config: PipelineConfig, decimation_factor: int = 1) -> ChannelAnalysis:
    started = time.perf_counter()
    spectrum = stft(series, config.stft)
    logp = log_power(spectrum)
    model = estimate_baseline(logp, config.baseline)
    analysis = ChannelAnalysis(
        series=series,
        decimation_factor=decimation_factor,
        spectrum=spectrum,
        power=power(spectrum),
        log_power=logp,
        model=model,
        whitened=whiten(logp, model),
        whitened_complex=whiten_complex(spectrum, model),
    )
    logger.info(
        f"{series.channel_id}: baseline done on {spectrum.n_freqs}x{spectrum.n_frames} "
        f"in {time.perf_counter() - started:.2f}s"
    )
    return analysis


def denoised_whitened(analysis: ChannelAnalysis, denoised: Spectrogram) -> Spectrogram:
    """Log-potencia del complejo ya blanqueado y denoised, en unidades de la escala residual."""
    return whiten(log_power(denoised), analysis.model.without_baseline())


def segment_channel(
    analysis: ChannelAnalysis, detection: Spectrogram, config: PipelineConfig, outcome: ChannelOutcome
) -> ChannelOutcome:
    seg = config.segment
    knee = knee_threshold(detection, config.threshold.grid_points)
    mask = apply_threshold(detection, knee)
    profile = flag_transients(analysis.whitened, mask, seg.k_mad, seg.coverage_fraction)
    # la ganancia CPS de un bloque con transitorio no es fiable en todo el bloque
    block = config.denoise.block if outcome.gain is not None else 1
    coherent_mask, transient_mask = split_transient_mask(
        mask,
        profile,
        seg.bridge_transients,
        block=block,
        pad=config.stft.window_len // (2 * config.stft.hop),
        persistence_frames=seg.persistence_frames,
        onset_frames=min(seg.onset_frames, seg.persistence_frames),
        max_gap=seg.max_gap_frames,
    )

    geometries = relabel(
        label_regions(coherent_mask, seg.connectivity, seg.min_region_pixels)
        + label_regions(transient_mask, seg.connectivity, seg.min_region_pixels)
    )
    records = measure_regions(geometries, analysis.power, profile, seg.transient_fraction)

    outcome.knee = knee.as_report()
    outcome.transient_frames = profile.flagged_frames.tolist()
    outcome.records = records
    outcome.geometries = geometries
    outcome.mask = mask
    outcome.labels = mask.with_values(label_image(geometries, mask.shape), SpectrogramKind.LABELS)
    logger.info(
        f"{analysis.series.channel_id}: threshold {knee.threshold:.3f}, {len(records)} regions, "
        f"{len(outcome.transient_frames)} transient frames"
    )
    return outcome


# --- Salidas ---

def _stem(shot_id: str, channel_id: str) -> str:
    return f"{shot_id}_{channel_id}"


def write_channel_outputs(
    analysis: ChannelAnalysis,
    outcome: ChannelOutcome,
    config: PipelineConfig,
    out_dir: Path,
) -> None:
    stem = _stem(analysis.series.shot_id, analysis.series.channel_id)
    formats = set(config.output.formats)
    if OutputFormat.CSV in formats:
        path = out_dir / f"{stem}_regions.csv"
        write_regions_csv(outcome.records, path)
        outcome.artifacts.append(path.name)
    if OutputFormat.JSONL in formats:
        path = out_dir / f"{stem}_regions.jsonl"
        write_regions_jsonl(outcome.records, path)
        outcome.artifacts.append(path.name)
    if OutputFormat.IMAGES in formats:
        render(analysis.log_power, RenderStyle.POWER_DB, out_dir / f"{stem}_power.png")
        outcome.artifacts.append(f"{stem}_power.png")
        if outcome.mask is not None:
            render(analysis.log_power, RenderStyle.MASK_OVERLAY, out_dir / f"{stem}_mask.png", overlay=outcome.mask)
            render(gate_spectrogram(analysis.power, outcome.mask), RenderStyle.GATED, out_dir / f"{stem}_gated.png")
            outcome.artifacts.extend([f"{stem}_mask.png", f"{stem}_gated.png"])
    if OutputFormat.CONTAINER in formats:
        planes = {
            "baseline": analysis.model.baseline,
            "residual_scale": analysis.model.residual_scale,
        }
        if outcome.mask is not None:
            planes["mask"] = outcome.mask.values
            planes["labels"] = outcome.labels.values
        if outcome.gain is not None:
            planes["coherence"] = outcome.gain
        path = out_dir / f"{stem}.tfs"
        meta = {"channel_id": analysis.series.channel_id, **analysis.series.extra}
        write_container(path, analysis.whitened, planes, meta=meta)
        outcome.artifacts.append(path.name)


def _versions() -> Dict[str, str]:
    return {
        "tfmodes": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pandas": pd.__version__,
        "matplotlib": matplotlib.__version__,
        "pydantic": pydantic.VERSION,
    }


# --- Orquestación ---

def run_pipeline(
    manifest_path: PathLike,
    config: Optional[PipelineConfig] = None,
    threads: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
) -> PipelineResult:
    """Ejecuta el pipeline sobre un manifiesto; los errores de cada canal quedan atribuidos a ese canal."""
    config = config or PipelineConfig()
    threads = threads or DEFAULT_THREADS
    out_dir = Path(out_dir or config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    manifest = load_manifest(manifest_path)
    warnings: List[str] = []
    outcomes: Dict[str, ChannelOutcome] = {}
    analyses: Dict[str, ChannelAnalysis] = {}

    def stage_one(entry: ManifestEntry):
        try:
            series, factor = prepare_channel(entry, config)
            return analyze_channel(series, config, factor), None
        except TfModesError as e:
            return None, (_entry_channel_id(entry), e)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for analysis, failure in pool.map(stage_one, manifest.channels):
            if failure is not None:
                channel_id, error = failure
                logger.error(f"{channel_id}: {type(error).__name__}: {error}")
                outcomes[channel_id] = ChannelOutcome(channel_id, ChannelStatus.FAILED, error=f"{type(error).__name__}: {error}")
                continue
            cid = analysis.series.channel_id
            analyses[cid] = analysis
            outcomes[cid] = ChannelOutcome(
                cid,
                decimation_factor=analysis.decimation_factor,
                dims=list(analysis.spectrum.shape),
                unconverged_slices=int(np.count_nonzero(~analysis.model.converged)),
                extra=dict(analysis.series.extra),
            )

    order = sorted(analyses)
    shot_id = manifest.shot_id or (analyses[order[0]].series.shot_id if order else "unknown")

    # denoising multicanal sobre la pila blanqueada (fase intacta)
    detection: Dict[str, Spectrogram] = {cid: analyses[cid].whitened for cid in order}
    if config.denoise.method == DenoiseMethod.CPS:
        if len(order) < 2:
            message = f"CPS denoising needs at least 2 channels, {len(order)} available; denoising skipped"
            logger.warning(message)
            warnings.append(message)
        else:
            stack = [analyses[cid].whitened_complex for cid in order]
            try:
                denoiser = CpsDenoiser(config.denoise.block)
                gains = denoiser.coherence_gains(stack)
                for cid, spec, gain in zip(order, stack, gains):
                    detection[cid] = denoised_whitened(analyses[cid], apply_gain(spec, gain, denoiser.block))
                    outcomes[cid].gain = gain
            except TfModesError as e:
                message = f"CPS denoising skipped: {type(e).__name__}: {e}"
                logger.warning(message)
                warnings.append(message)
                for cid in order:
                    outcomes[cid].status = ChannelStatus.DEGRADED

    def stage_two(cid: str) -> ChannelOutcome:
        analysis, outcome = analyses[cid], outcomes[cid]
        outcome.total_variation = {
            "whitened": _tv(analysis.whitened),
            "detection": _tv(detection[cid]),
        }
        try:
            segment_channel(analysis, detection[cid], config, outcome)
        except DegenerateDistributionError as e:
            logger.warning(f"{cid}: {e}; no regions extracted")
            outcome.status = ChannelStatus.DEGRADED
            outcome.error = f"DegenerateDistributionError: {e}"
        except TfModesError as e:
            logger.error(f"{cid}: {type(e).__name__}: {e}")
            outcome.status = ChannelStatus.FAILED
            outcome.error = f"{type(e).__name__}: {e}"
            return outcome
        try:
            write_channel_outputs(analysis, outcome, config, out_dir)
        except TfModesError as e:
            logger.error(f"{cid}: {type(e).__name__}: {e}")
            outcome.status = ChannelStatus.FAILED
            outcome.error = f"{type(e).__name__}: {e}"
        return outcome

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(stage_two, order))

    ordered = [outcomes[cid] for cid in sorted(outcomes)]
    all_records = [r for o in ordered for r in o.records]
    bands = band_summary(all_records, config.segment.band_edges_khz)

    if OutputFormat.SQLITE in config.output.formats:
        url = config.output.db_url or f"sqlite:///{(out_dir / 'regions.db').as_posix()}"
        engine = make_engine(url)
        with Session(engine) as db:
            for o in ordered:
                if o.status != ChannelStatus.FAILED:
                    store_regions(db, shot_id, o.channel_id, o.records)
        engine.dispose()

    result = PipelineResult(shot_id=shot_id, outcomes=ordered, warnings=warnings, bands=bands)
    result.metadata_path = write_run_metadata(result, config, manifest_path, out_dir)
    logger.info(
        f"Shot {shot_id}: {len(ordered)} channels in {time.perf_counter() - started:.2f}s, "
        f"exit status {result.exit_status}"
    )
    return result


def _entry_channel_id(entry: ManifestEntry) -> str:
    try:
        return read_sidecar(entry.sidecar).channel_id
    except TfModesError:
        return Path(entry.sidecar).stem


def _tv(spec: Spectrogram) -> float:
    return total_variation(spec.with_values(spec.values[spec.guard_bins:], spec.kind,
                                            freq_axis_hz=spec.freq_axis_hz[spec.guard_bins:], guard_bins=0))


def write_run_metadata(result: PipelineResult, config: PipelineConfig, manifest_path: PathLike, out_dir: Path) -> Path:
    """JSON con toda la configuración efectiva y versiones; sirve como --config para repetir la ejecución."""
    metadata = {
        "shot_id": result.shot_id,
        "manifest": Path(manifest_path).name,
        "config": config.echo(),
        "versions": _versions(),
        "exit_status": result.exit_status,
        "warnings": result.warnings,
        "channels": [o.summary() for o in result.outcomes],
        "band_summary": json.loads(result.bands.to_json(orient="records", double_precision=15)),
        "decisions": {
            "amplitude": "sum of linear pre-whitening power over region pixels",
            "transient_rule": f"region is transient when >= {config.segment.transient_fraction:g} of its frames are flagged",
            "coverage_gate": config.segment.coverage_fraction,
            "connectivity": config.segment.connectivity,
            "persistence": f"bin (+-1) active in >= half of {config.segment.persistence_frames} frames",
        },
    }
    path = out_dir / f"{result.shot_id}_run.json"
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    return path
