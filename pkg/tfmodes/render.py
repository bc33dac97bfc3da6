import logging
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Patch

from .errors import OutputError
from .tfa import POWER_FLOOR, Spectrogram, SpectrogramKind

logger = logging.getLogger(__name__)

CLIP_PERCENTILES = (0.1, 99.9)
OVERLAY_RGB = np.array([1.0, 0.15, 0.1])
OVERLAY_ALPHA = 0.6


class RenderStyle(str, Enum):
    POWER_DB = "power_db"
    MASK_OVERLAY = "mask_overlay"
    GATED = "gated"


def _display_values(spec: Spectrogram) -> np.ndarray:
    if spec.kind == SpectrogramKind.COMPLEX:
        z = spec.values
        return 10.0 * np.log10(z.real ** 2 + z.imag ** 2 + POWER_FLOOR)
    if spec.kind == SpectrogramKind.POWER:
        return 10.0 * np.log10(spec.values + POWER_FLOOR)
    return np.asarray(spec.values, dtype=np.float64)


def scale_to_unit(values: np.ndarray) -> np.ndarray:
    """Recorte a los percentiles 0.1 y 99.9 y escala a [0,1]; una entrada constante da 0.5."""
    lo, hi = np.percentile(values, CLIP_PERCENTILES)
    if not hi > lo:
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def to_raster(spec: Spectrogram, style: RenderStyle = RenderStyle.POWER_DB,
              overlay: Optional[Spectrogram] = None) -> np.ndarray:
    """
    Imagen en [0,1] con la fila 0 en la frecuencia más alta. En mask_overlay se
    devuelve RGB (alto x ancho x 3) con la máscara teñida sobre la base en gris.
    """
    style = RenderStyle(style)
    gray = scale_to_unit(_display_values(spec))[::-1]
    if style != RenderStyle.MASK_OVERLAY:
        return gray
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if overlay is not None:
        hit = (overlay.values != 0)[::-1]
        rgb[hit] = (1 - OVERLAY_ALPHA) * rgb[hit] + OVERLAY_ALPHA * OVERLAY_RGB
    return rgb


def render(spec: Spectrogram, style: RenderStyle, out: Union[str, Path],
           overlay: Optional[Spectrogram] = None, title: Optional[str] = None) -> Path:
    """Escribe un PNG con ejes en ms / kHz; bytes identicos para entradas identicas."""
    style = RenderStyle(style)
    raster = to_raster(spec, style, overlay)
    extent = [
        float(spec.time_axis_ms[0]), float(spec.time_axis_ms[-1]),
        float(spec.freq_axis_hz[0]) / 1000.0, float(spec.freq_axis_hz[-1]) / 1000.0,
    ]
    fig = Figure(figsize=(8, 4), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(raster, cmap="gray", vmin=0.0, vmax=1.0, aspect="auto", extent=extent, interpolation="nearest")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("frequency (kHz)")
    ax.set_title(title or f"{spec.channel_id} {style.value}")
    if style == RenderStyle.MASK_OVERLAY:
        ax.legend(handles=[Patch(color=OVERLAY_RGB, label="mask")], loc="upper right")
    fig.tight_layout()

    out = Path(out)
    try:
        fig.savefig(out, format="png", metadata={"Software": None})
    except OSError as e:
        raise OutputError(f"cannot write image {out}: {e}") from e
    logger.debug(f"Rendered {out}")
    return out
