import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- Configuración por defecto ---
DEFAULT_THREADS = int(os.environ.get("TFMODES_THREADS", "0")) or (os.cpu_count() or 1)


class WindowKind(str, Enum):
    HANN = "hann"


class DenoiseMethod(str, Enum):
    CPS = "cps"
    NONE = "none"


class OutputFormat(str, Enum):
    CSV = "csv"
    JSONL = "jsonl"
    IMAGES = "images"
    CONTAINER = "spectrogram-container"
    SQLITE = "sqlite"


# --- Modelos de configuración por etapa ---

class StftConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_len: int = Field(1024, ge=8)
    overlap_fraction: float = Field(0.875, ge=0.0, lt=1.0)
    window: WindowKind = WindowKind.HANN
    one_sided: Literal[True] = True

    @field_validator("window_len")
    @classmethod
    def window_len_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("window_len must be even")
        return value

    @model_validator(mode="after")
    def hop_is_integer(self):
        hop = self.window_len * (1.0 - self.overlap_fraction)
        if hop < 1 or abs(hop - round(hop)) > 1e-9:
            raise ValueError(
                f"window_len * (1 - overlap_fraction) = {hop} must be a positive integer"
            )
        return self

    @property
    def hop(self) -> int:
        return int(round(self.window_len * (1.0 - self.overlap_fraction)))


class DecimationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    filter_order: int = Field(8, ge=2)
    ripple_db: float = Field(0.05, gt=0.0, le=3.0)
    cutoff_fraction: float = Field(0.8, gt=0.0, lt=1.0)


class BaselineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    p: float = Field(0.001, gt=0.0, lt=0.5)
    lam: float = Field(1e6, alias="lambda", gt=0.0)
    alpha: float = Field(1.0, ge=0.0)
    max_iters: int = Field(50, ge=1)
    weight_tol: float = Field(1e-3, ge=0.0)
    exclude_dc: bool = True
    guard_khz: float = Field(4.0, ge=0.0)
    recenter: bool = True
    level_median_frames: int = Field(31, ge=1)
    # pasadas que corrigen la pendiente residual en log-frecuencia de cada rodaja
    tilt_passes: int = Field(2, ge=0)
    l1_penalty: bool = False

    @field_validator("level_median_frames")
    @classmethod
    def odd_median(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("level_median_frames must be odd")
        return value

    @field_validator("l1_penalty")
    @classmethod
    def l1_not_available(cls, value: bool) -> bool:
        if value:
            raise ValueError("the L1 curvature penalty is not implemented; only the quadratic penalty is available")
        return value


class DenoiseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: DenoiseMethod = DenoiseMethod.CPS
    block: int = Field(16, ge=1)


class ThresholdConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid_points: int = Field(2048, ge=16)


class SegmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    connectivity: Literal[4, 8] = 8
    min_region_pixels: int = Field(12, ge=1)
    k_mad: float = Field(5.0, gt=0.0)
    coverage_fraction: float = Field(0.3, gt=0.0, le=1.0)
    transient_fraction: float = Field(0.5, gt=0.0, le=1.0)
    bridge_transients: bool = True
    # un modo coherente debe ocupar su bin (+-1) en la mitad de estas tramas
    persistence_frames: int = Field(256, ge=1)
    onset_frames: int = Field(32, ge=1)
    max_gap_frames: int = Field(128, ge=0)
    band_edges_khz: List[float] = Field(default_factory=lambda: [0.0, 50.0, 250.0])

    @field_validator("band_edges_khz")
    @classmethod
    def edges_increasing(cls, value: List[float]) -> List[float]:
        if len(value) < 2 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("band_edges_khz must hold at least two strictly increasing edges")
        return value


class OutputConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dir: str = "out"
    formats: List[OutputFormat] = Field(default_factory=lambda: [OutputFormat.CSV, OutputFormat.JSONL])
    db_url: Optional[str] = None

    @field_validator("formats")
    @classmethod
    def unique_formats(cls, value: List[OutputFormat]) -> List[OutputFormat]:
        # orden estable para que el eco de configuración sea reproducible
        return sorted(set(value), key=lambda f: list(OutputFormat).index(f))


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    target_rate_hz: float = Field(500_000.0, gt=0.0)
    stft: StftConfig = Field(default_factory=StftConfig)
    decimation: DecimationConfig = Field(default_factory=DecimationConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    denoise: DenoiseConfig = Field(default_factory=DenoiseConfig)
    threshold: ThresholdConfig = Field(default_factory=ThresholdConfig)
    segment: SegmentConfig = Field(default_factory=SegmentConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def echo(self) -> Dict[str, Any]:
        """Configuración efectiva serializable, con los alias públicos (p.ej. `lambda`)."""
        return self.model_dump(mode="json", by_alias=True)


# --- Carga y sobreescritura ---

def load_config(path: Union[str, Path]) -> PipelineConfig:
    """
    Carga un PipelineConfig desde JSON. Acepta también el JSON de metadatos de
    una ejecución previa (se usa su clave `config`), lo que permite repetirla.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    return PipelineConfig.model_validate(data)


def with_overrides(config: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """Aplica sobreescrituras con rutas punteadas (`baseline.lambda`); los valores None se ignoran."""
    data = config.echo()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        if isinstance(value, Enum):
            value = value.value
        node[leaf] = value
    return PipelineConfig.model_validate(data)
