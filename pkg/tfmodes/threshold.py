import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel

from .errors import DegenerateDistributionError, InvalidParameterError
from .tfa import Spectrogram, SpectrogramKind, require_kind

logger = logging.getLogger(__name__)


class KneeReport(BaseModel):
    """Diagnóstico JSON del umbral de codo."""
    threshold: float
    max_distance: float
    knee_index: int
    grid_points: int
    floor: float
    value_max: float


@dataclass(frozen=True, eq=False)
class KneeResult:
    threshold: float
    cdf_x: np.ndarray
    cdf_y: np.ndarray
    knee_index: int
    max_distance: float
    floor: float

    def as_report(self) -> KneeReport:
        return KneeReport(
            threshold=self.threshold,
            max_distance=self.max_distance,
            knee_index=self.knee_index,
            grid_points=int(self.cdf_x.size),
            floor=self.floor,
            value_max=float(self.cdf_x[-1]),
        )


def _exact_knee(floored: np.ndarray, cdf0: float) -> Tuple[float, float]:
    """Máximo de la distancia a la cuerda sobre los saltos de la CDF empírica exacta."""
    lo, hi = floored[0], floored[-1]
    # último índice de cada valor distinto: ahí la CDF continua por la derecha alcanza su salto
    last = np.append(np.flatnonzero(np.diff(floored) > 0), floored.size - 1)
    values = floored[last]
    cdf = (last + 1) / floored.size
    distance = ((cdf - cdf0) / (1.0 - cdf0) - (values - lo) / (hi - lo)) / np.sqrt(2.0)
    best = int(np.argmax(distance))
    return float(values[best]), float(distance[best])


def knee_threshold(spec: Spectrogram, grid_points: int = 2048) -> KneeResult:
    """
    Umbral global sin parámetros: se satura por debajo a la media, se muestrea
    la CDF empírica en `grid_points` intensidades y se busca el punto de máxima
    distancia a la cuerda entre sus extremos (ambos ejes normalizados a [0,1]).
    El máximo se resuelve sobre la CDF exacta; la rejilla queda como diagnóstico
    y `knee_index` apunta a su nodo más cercano.
    """
    require_kind(spec, SpectrogramKind.WHITENED, SpectrogramKind.LOG_POWER, SpectrogramKind.POWER)
    if grid_points < 2:
        raise InvalidParameterError(f"grid_points must be >= 2, got {grid_points}")
    values = spec.values[spec.in_band].ravel()
    if values.size == 0:
        raise DegenerateDistributionError(f"{spec.channel_id}: no in-band values to threshold")

    floor = float(values.mean())
    floored = np.sort(np.maximum(values, floor))
    lo, hi = float(floored[0]), float(floored[-1])
    if not hi > lo:
        raise DegenerateDistributionError(f"{spec.channel_id}: all in-band values equal after mean flooring")

    grid = np.linspace(lo, hi, grid_points)
    cdf = np.searchsorted(floored, grid, side="right") / floored.size
    cdf[-1] = 1.0

    threshold, max_distance = _exact_knee(floored, float(cdf[0]))
    knee = int(np.clip(np.rint((threshold - lo) / (hi - lo) * (grid_points - 1)), 0, grid_points - 1))

    result = KneeResult(
        threshold=threshold,
        cdf_x=grid,
        cdf_y=cdf,
        knee_index=knee,
        max_distance=max_distance,
        floor=floor,
    )
    logger.debug(f"Knee {spec.channel_id}: threshold {result.threshold:.4g} near grid index {knee}/{grid_points}")
    return result


def apply_threshold(spec: Spectrogram, knee: Union[KneeResult, float]) -> Spectrogram:
    """Máscara 1 donde valor >= umbral fuera de la banda de guarda."""
    threshold = knee.threshold if isinstance(knee, KneeResult) else float(knee)
    mask = (spec.values >= threshold) & spec.in_band[:, None]
    return spec.with_values(mask.astype(np.uint8), SpectrogramKind.MASK)
