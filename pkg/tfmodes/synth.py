"""
Disparos sintéticos multicanal con verdad exacta: chirps, bandas cuasi-coherentes,
fondo 1/f^chi, ráfagas transitorias y ruido estocástico. Sirven de oráculo para
las pruebas de aceptación.
"""
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy import fft, ndimage, signal

from .config import StftConfig
from .errors import AxisMismatchError, InvalidSpecError
from .ingest import ChannelSeries, save_channel
from .tfa import Spectrogram, SpectrogramKind, frequency_axis

logger = logging.getLogger(__name__)

# flujos del generador por componente; canal 0 = componentes compartidas
STREAM_NOISE = 0
STREAM_BACKGROUND = 1
STREAM_QC = 1000
STREAM_TRANSIENT = 2000


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"
    UNIFORM = "uniform"


class QcFilter(str, Enum):
    SPECTRAL = "spectral"  # espectro recortado a la banda nominal
    BANDPASS = "bandpass"  # Butterworth pasa-banda de orden 4


class ComponentClass(str, Enum):
    COHERENT = "coherent"
    QUASI_COHERENT = "quasi_coherent"
    TRANSIENT = "transient"
    BROAD = "broad"
    STOCHASTIC = "stochastic"


# --- Especificación del disparo ---

class ToneSpec(BaseModel):
    f0_hz: float = Field(ge=0)
    f1_hz: float = Field(ge=0)
    t_start_s: float = Field(ge=0)
    t_end_s: float
    amplitude: float = Field(ge=0)
    shared: bool = True
    channel: int = Field(0, ge=0)

    @model_validator(mode="after")
    def ordered_times(self):
        if self.t_end_s <= self.t_start_s:
            raise ValueError("tone t_end_s must be after t_start_s")
        return self


class QcBandSpec(BaseModel):
    center_hz: float = Field(gt=0)
    bandwidth_hz: float = Field(gt=0)
    amplitude: float = Field(ge=0)
    filter: QcFilter = QcFilter.SPECTRAL
    t_start_s: Optional[float] = None
    t_end_s: Optional[float] = None


class BackgroundSpec(BaseModel):
    chi: float = Field(0.0, ge=0, le=3)
    amplitude: float = Field(0.0, ge=0)
    f_ref_hz: float = Field(10_000.0, gt=0)
    corner_hz: float = Field(1_000.0, gt=0)
    shared: bool = False


class TransientSpec(BaseModel):
    t_s: float = Field(ge=0)
    width_s: float = Field(gt=0)
    amplitude: float = Field(ge=0)


class NoiseSpec(BaseModel):
    kind: NoiseKind = NoiseKind.GAUSSIAN
    sigma: Union[float, List[float]] = 1.0

    @field_validator("sigma")
    @classmethod
    def non_negative(cls, value):
        values = value if isinstance(value, list) else [value]
        if any(s < 0 for s in values):
            raise ValueError("noise sigma must be >= 0")
        return value


class SyntheticShotSpec(BaseModel):
    duration_s: float = Field(gt=0)
    sample_rate_hz: float = Field(500_000.0, gt=0)
    channels: int = Field(4, ge=1)
    tones: List[ToneSpec] = []
    qc_bands: List[QcBandSpec] = []
    background: BackgroundSpec = BackgroundSpec()
    transients: List[TransientSpec] = []
    noise: NoiseSpec = NoiseSpec()
    seed: int = Field(0, ge=0)
    shot_id: str = "synthetic"
    t0_ms: float = 0.0

    @model_validator(mode="after")
    def within_shot(self):
        nyquist = self.sample_rate_hz / 2
        for tone in self.tones:
            if tone.t_end_s > self.duration_s:
                raise ValueError("tone extends past the end of the shot")
            if max(tone.f0_hz, tone.f1_hz) > nyquist:
                raise ValueError("tone frequency above Nyquist")
            if not tone.shared and tone.channel >= self.channels:
                raise ValueError(f"tone channel {tone.channel} does not exist")
        for band in self.qc_bands:
            if band.center_hz + band.bandwidth_hz / 2 >= nyquist or band.center_hz - band.bandwidth_hz / 2 <= 0:
                raise ValueError("quasi-coherent band must lie inside (0, Nyquist)")
            start, end = band.t_start_s or 0.0, band.t_end_s if band.t_end_s is not None else self.duration_s
            if not 0 <= start < end <= self.duration_s:
                raise ValueError("quasi-coherent band times outside the shot")
        for burst in self.transients:
            if burst.t_s > self.duration_s:
                raise ValueError("transient after the end of the shot")
        if isinstance(self.noise.sigma, list) and len(self.noise.sigma) != self.channels:
            raise ValueError("one noise sigma per channel expected")
        return self

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    def sigma_for(self, channel: int) -> float:
        sigma = self.noise.sigma
        return float(sigma[channel] if isinstance(sigma, list) else sigma)


# --- Verdad de referencia ---

class TruthComponent(BaseModel):
    name: str
    component_class: ComponentClass
    energy: float
    channels: List[int]
    support: List[Tuple[int, int, int]] = []


class GroundTruth(BaseModel):
    """Soporte (t,f) de cada componente en RLE: tripletas (trama, bin inicial, longitud)."""
    shot_id: str
    sample_rate_hz: float
    window_len: int
    hop: int
    n_freqs: int
    n_frames: int
    components: List[TruthComponent]
    transient_frames: List[int] = []

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_freqs, self.n_frames)

    def support_mask(self, *classes: ComponentClass) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for component in self.components:
            if not classes or component.component_class in classes:
                mask |= decode_support(component.support, self.shape)
        return mask


def encode_support(mask: np.ndarray) -> List[Tuple[int, int, int]]:
    runs = []
    for frame in range(mask.shape[1]):
        column = np.concatenate([[False], mask[:, frame], [False]]).astype(np.int8)
        edges = np.diff(column)
        for start, stop in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            runs.append((frame, int(start), int(stop - start)))
    return runs


def decode_support(runs: Sequence[Sequence[int]], shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for frame, start, length in runs:
        mask[start:start + length, frame] = True
    return mask


# --- Generación ---

def _rng(seed: int, channel_key: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, channel_key, stream])))


def _frame_centers_s(n_frames: int, cfg: StftConfig, fs: float) -> np.ndarray:
    return (np.arange(n_frames) * cfg.hop + cfg.window_len / 2) / fs


def _noise(rng: np.random.Generator, kind: NoiseKind, sigma: float, n: int) -> np.ndarray:
    if kind == NoiseKind.LAPLACIAN:
        return rng.laplace(0.0, sigma / np.sqrt(2.0), n)
    if kind == NoiseKind.UNIFORM:
        half = sigma * np.sqrt(3.0)
        return rng.uniform(-half, half, n)
    return rng.normal(0.0, sigma, n)


def _tone(tone: ToneSpec, t: np.ndarray) -> np.ndarray:
    active = (t >= tone.t_start_s) & (t < tone.t_end_s)
    tau = t[active] - tone.t_start_s
    rate = (tone.f1_hz - tone.f0_hz) / (tone.t_end_s - tone.t_start_s)
    out = np.zeros_like(t)
    out[active] = tone.amplitude * np.sin(2 * np.pi * (tone.f0_hz * tau + 0.5 * rate * tau ** 2))
    return out


def _tone_support(tone: ToneSpec, shape: Tuple[int, int], centers: np.ndarray, df: float) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    frames = np.flatnonzero((centers >= tone.t_start_s) & (centers < tone.t_end_s))
    rate = (tone.f1_hz - tone.f0_hz) / (tone.t_end_s - tone.t_start_s)
    f_inst = tone.f0_hz + rate * (centers[frames] - tone.t_start_s)
    low = np.clip(np.floor(f_inst / df).astype(int), 0, shape[0] - 1)
    high = np.clip(low + 1, 0, shape[0] - 1)
    mask[low, frames] = True
    mask[high, frames] = True
    return mask


def _qc_band(band: QcBandSpec, rng: np.random.Generator, t: np.ndarray, fs: float, duration_s: float) -> np.ndarray:
    """Ruido gaussiano en la banda |f - f_c| <= B/2 con desviación `amplitude`."""
    noise = rng.normal(0.0, 1.0, t.size)
    if band.filter == QcFilter.BANDPASS:
        edges = [band.center_hz - band.bandwidth_hz / 2, band.center_hz + band.bandwidth_hz / 2]
        x = signal.sosfilt(signal.butter(2, edges, btype="bandpass", fs=fs, output="sos"), noise)
    else:
        spectrum = fft.rfft(noise)
        f = np.fft.rfftfreq(t.size, 1.0 / fs)
        spectrum[np.abs(f - band.center_hz) > band.bandwidth_hz / 2] = 0.0
        x = fft.irfft(spectrum, n=t.size)
    x *= band.amplitude / max(float(np.std(x)), np.finfo(float).tiny)
    start, end = band.t_start_s or 0.0, band.t_end_s if band.t_end_s is not None else duration_s
    x[(t < start) | (t >= end)] = 0.0
    return x


def _background(bg: BackgroundSpec, rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    """Ruido blanco conformado en frecuencia con |H(f)| = a * (max(f, f_c) / f_ref)^(-chi/2)."""
    spectrum = fft.rfft(rng.normal(0.0, 1.0, n))
    f = np.maximum(np.fft.rfftfreq(n, 1.0 / fs), bg.corner_hz)
    spectrum *= bg.amplitude * (f / bg.f_ref_hz) ** (-bg.chi / 2.0)
    return fft.irfft(spectrum, n=n)


def _burst(burst: TransientSpec, rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    width = max(int(round(burst.width_s * fs)), 2)
    start = int(round(burst.t_s * fs)) - width // 2
    out = np.zeros(n)
    chunk = burst.amplitude * signal.get_window("hann", width, fftbins=False) * rng.normal(0.0, 1.0, width)
    lo, hi = max(start, 0), min(start + width, n)
    if hi > lo:
        out[lo:hi] = chunk[lo - start:hi - start]
    return out


def validate_spec(spec: Union[SyntheticShotSpec, Mapping[str, Any]]) -> SyntheticShotSpec:
    try:
        data = spec.model_dump() if isinstance(spec, SyntheticShotSpec) else dict(spec)
        return SyntheticShotSpec.model_validate(data)
    except ValidationError as e:
        raise InvalidSpecError(f"invalid synthetic shot: {e}") from e


def load_synth_spec(path: Union[str, Path]) -> SyntheticShotSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidSpecError(f"{path} is not valid JSON: {e}") from e
    return validate_spec(data)


def generate_shot(
    spec: Union[SyntheticShotSpec, Mapping[str, Any]],
    stft_cfg: Optional[StftConfig] = None,
    guard_hz: float = 4000.0,
) -> Tuple[List[ChannelSeries], GroundTruth]:
    """Genera los canales y la verdad sobre la rejilla STFT de `stft_cfg`."""
    spec = validate_spec(spec)
    stft_cfg = stft_cfg or StftConfig()
    fs, n = spec.sample_rate_hz, spec.n_samples
    if n < stft_cfg.window_len:
        raise InvalidSpecError(f"{n} samples is shorter than one {stft_cfg.window_len}-sample window")
    t = np.arange(n) / fs

    n_frames = (n - stft_cfg.window_len) // stft_cfg.hop + 1
    shape = (stft_cfg.window_len // 2 + 1, n_frames)
    df = fs / stft_cfg.window_len
    centers = _frame_centers_s(n_frames, stft_cfg, fs)
    all_channels = list(range(spec.channels))

    signals = np.zeros((spec.channels, n))
    components: List[TruthComponent] = []

    for i, tone in enumerate(spec.tones):
        x = _tone(tone, t)
        targets = all_channels if tone.shared else [tone.channel]
        signals[targets] += x
        active = int(np.count_nonzero((t >= tone.t_start_s) & (t < tone.t_end_s)))
        components.append(TruthComponent(
            name=f"tone{i}",
            component_class=ComponentClass.COHERENT,
            energy=0.5 * tone.amplitude ** 2 * active,
            channels=targets,
            support=encode_support(_tone_support(tone, shape, centers, df)),
        ))

    for i, band in enumerate(spec.qc_bands):
        x = _qc_band(band, _rng(spec.seed, 0, STREAM_QC + i), t, fs, spec.duration_s)
        signals += x
        start, end = band.t_start_s or 0.0, band.t_end_s if band.t_end_s is not None else spec.duration_s
        support = np.zeros(shape, dtype=bool)
        lo = int(np.floor((band.center_hz - band.bandwidth_hz / 2) / df))
        hi = int(np.ceil((band.center_hz + band.bandwidth_hz / 2) / df))
        support[lo:hi + 1, (centers >= start) & (centers < end)] = True
        components.append(TruthComponent(
            name=f"qc{i}",
            component_class=ComponentClass.QUASI_COHERENT,
            energy=float(np.sum(x ** 2)),
            channels=all_channels,
            support=encode_support(support),
        ))

    if spec.background.amplitude > 0:
        bg = spec.background
        energy = 0.0
        shared = _background(bg, _rng(spec.seed, 0, STREAM_BACKGROUND), n, fs) if bg.shared else None
        for c in all_channels:
            x = shared if shared is not None else _background(bg, _rng(spec.seed, c + 1, STREAM_BACKGROUND), n, fs)
            signals[c] += x
            energy += float(np.sum(x ** 2))
        components.append(TruthComponent(
            name="background", component_class=ComponentClass.BROAD, energy=energy, channels=all_channels,
        ))

    transient_frames = []
    guard_bin = int(np.count_nonzero(frequency_axis(stft_cfg.window_len, fs) < guard_hz))
    reach = stft_cfg.window_len / 4 / fs
    for i, burst in enumerate(spec.transients):
        x = _burst(burst, _rng(spec.seed, 0, STREAM_TRANSIENT + i), n, fs)
        signals += x
        frame = int(np.clip(round((burst.t_s * fs - stft_cfg.window_len / 2) / stft_cfg.hop), 0, n_frames - 1))
        transient_frames.append(frame)
        support = np.zeros(shape, dtype=bool)
        near = np.abs(centers - burst.t_s) <= burst.width_s / 2 + reach
        support[guard_bin:, near] = True
        components.append(TruthComponent(
            name=f"transient{i}",
            component_class=ComponentClass.TRANSIENT,
            energy=float(np.sum(x ** 2)),
            channels=all_channels,
            support=encode_support(support),
        ))

    noise_energy = 0.0
    for c in all_channels:
        sigma = spec.sigma_for(c)
        if sigma > 0:
            x = _noise(_rng(spec.seed, c + 1, STREAM_NOISE), spec.noise.kind, sigma, n)
            signals[c] += x
            noise_energy += float(np.sum(x ** 2))
    components.append(TruthComponent(
        name="noise", component_class=ComponentClass.STOCHASTIC, energy=noise_energy, channels=all_channels,
    ))

    series = [
        ChannelSeries(
            samples=signals[c],
            sample_rate_hz=fs,
            t0_ms=spec.t0_ms,
            channel_id=f"ch{c}",
            shot_id=spec.shot_id,
            extra={"synthetic_seed": spec.seed},
        )
        for c in all_channels
    ]
    truth = GroundTruth(
        shot_id=spec.shot_id,
        sample_rate_hz=fs,
        window_len=stft_cfg.window_len,
        hop=stft_cfg.hop,
        n_freqs=shape[0],
        n_frames=n_frames,
        components=components,
        transient_frames=sorted(transient_frames),
    )
    logger.info(f"Generated shot {spec.shot_id}: {spec.channels} channels x {n} samples, {len(components)} components")
    return series, truth


def write_shot(spec: Union[SyntheticShotSpec, Mapping[str, Any]], out_dir: Union[str, Path],
               stft_cfg: Optional[StftConfig] = None) -> Path:
    """Escribe canales float32, sidecars, manifiesto y truth.json; devuelve la ruta del manifiesto."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, truth = generate_shot(spec, stft_cfg)
    entries = []
    for s in series:
        data, sidecar = f"{s.channel_id}.f32", f"{s.channel_id}.json"
        save_channel(s, out_dir / data, out_dir / sidecar)
        entries.append({"data": data, "sidecar": sidecar})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"shot_id": truth.shot_id, "channels": entries}, indent=2), encoding="utf-8")
    (out_dir / "truth.json").write_text(truth.model_dump_json(), encoding="utf-8")
    return manifest


def load_truth(path: Union[str, Path]) -> GroundTruth:
    return GroundTruth.model_validate_json(Path(path).read_text(encoding="utf-8"))


# --- Puntuación ---

class ClassScore(BaseModel):
    recall: float
    precision: float
    f1: float
    truth_pixels: int
    predicted_pixels: int
    no_predictions: bool = False


def _dilate_freq(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 1), dtype=bool))


def _score(truth: np.ndarray, predicted: np.ndarray) -> ClassScore:
    n_truth, n_pred = int(truth.sum()), int(predicted.sum())
    recall = float((truth & _dilate_freq(predicted)).sum() / n_truth) if n_truth else 1.0
    if n_pred:
        precision = float((predicted & _dilate_freq(truth)).sum() / n_pred)
    else:
        # convención: sin predicciones la precisión se reporta como 1.0 y se marca
        precision = 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassScore(
        recall=recall, precision=precision, f1=f1,
        truth_pixels=n_truth, predicted_pixels=n_pred, no_predictions=n_pred == 0,
    )


def score_detection(truth: GroundTruth, labels: Spectrogram, regions: Sequence[Any]) -> Dict[str, ClassScore]:
    """
    Recall/precisión a nivel de píxel con la verdad dilatada 1 bin en frecuencia.
    `labels` es la imagen de etiquetas (o máscara) sobre la misma rejilla que la verdad;
    `regions` aporta el tipo (coherent/transient) de cada etiqueta.
    """
    if labels.kind not in (SpectrogramKind.LABELS, SpectrogramKind.MASK):
        raise AxisMismatchError(f"expected a label image, got {labels.kind.value}")
    if (labels.shape != truth.shape or labels.window_len != truth.window_len or labels.hop != truth.hop
            or labels.sample_rate_hz != truth.sample_rate_hz):
        raise AxisMismatchError(
            f"label grid {labels.shape} @ {labels.sample_rate_hz} Hz does not match truth grid "
            f"{truth.shape} @ {truth.sample_rate_hz} Hz"
        )
    image = np.asarray(labels.values).astype(np.int64)
    kinds = {int(r.label): getattr(r.kind, "value", r.kind) for r in regions}
    coherent_labels = [label for label, kind in kinds.items() if kind == "coherent"]
    transient_labels = [label for label, kind in kinds.items() if kind == "transient"]

    predicted_all = image > 0
    predicted_coherent = np.isin(image, coherent_labels)
    predicted_transient = np.isin(image, transient_labels)
    return {
        "coherent": _score(truth.support_mask(ComponentClass.COHERENT, ComponentClass.QUASI_COHERENT), predicted_coherent),
        "tone": _score(truth.support_mask(ComponentClass.COHERENT), predicted_coherent),
        "quasi_coherent": _score(truth.support_mask(ComponentClass.QUASI_COHERENT), predicted_coherent),
        "transient": _score(truth.support_mask(ComponentClass.TRANSIENT), predicted_transient),
        "all": _score(
            truth.support_mask(ComponentClass.COHERENT, ComponentClass.QUASI_COHERENT, ComponentClass.TRANSIENT),
            predicted_all,
        ),
    }
