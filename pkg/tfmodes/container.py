"""
Contenedor binario autodescriptivo para espectrogramas:

    magic "TFSPEC1\\0" | uint32 LE longitud de cabecera | cabecera JSON UTF-8 |
    eje de frecuencia float64 | eje temporal float64 | planos

Cada plano va en orden de filas como float32 (real) o pares float32
intercalados (complejo). El plano "values" es el propio espectrograma; los
demás (línea base, coherencia, escala) son opcionales.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .errors import OutputError, UnsupportedEncodingError
from .tfa import Spectrogram, SpectrogramKind

MAGIC = b"TFSPEC1\x00"
PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Container:
    spectrogram: Spectrogram
    planes: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def _plane_dtype(array: np.ndarray) -> str:
    return "<c8" if np.iscomplexobj(array) else "<f4"


def write_container(
    path: PathLike,
    spec: Spectrogram,
    planes: Optional[Mapping[str, np.ndarray]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    arrays = {"values": np.asarray(spec.values)}
    for name, array in (planes or {}).items():
        array = np.asarray(array)
        arrays[name] = array if array.ndim == 2 else array.reshape(1, -1)

    header = {
        "kind": spec.kind.value,
        "window_len": spec.window_len,
        "hop": spec.hop,
        "sample_rate_hz": spec.sample_rate_hz,
        "guard_bins": spec.guard_bins,
        "channel_id": spec.channel_id,
        "n_freqs": spec.n_freqs,
        "n_frames": spec.n_frames,
        "planes": [
            {"name": name, "dtype": _plane_dtype(a), "shape": list(a.shape)}
            for name, a in arrays.items()
        ],
        "spectrogram_meta": spec.meta,
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True, default=str).encode("utf-8")
    try:
        with open(path, "wb") as out:
            out.write(MAGIC)
            out.write(struct.pack("<I", len(blob)))
            out.write(blob)
            out.write(np.asarray(spec.freq_axis_hz, dtype="<f8").tobytes())
            out.write(np.asarray(spec.time_axis_ms, dtype="<f8").tobytes())
            for name, a in arrays.items():
                out.write(np.ascontiguousarray(a, dtype=_plane_dtype(a)).tobytes())
    except OSError as e:
        raise OutputError(f"cannot write container {path}: {e}") from e


def read_container(path: PathLike) -> Container:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise UnsupportedEncodingError(f"{path} is not a spectrogram container")
    try:
        return _parse(raw)
    except (ValueError, KeyError, TypeError, struct.error) as e:
        # cabecera ilegible o fichero truncado
        raise UnsupportedEncodingError(f"{path}: malformed spectrogram container ({e})") from e


def _parse(raw: bytes) -> Container:
    (length,) = struct.unpack_from("<I", raw, len(MAGIC))
    offset = len(MAGIC) + 4
    header = json.loads(raw[offset:offset + length].decode("utf-8"))
    offset += length

    def take(dtype: str, shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * np.dtype(dtype).itemsize
        return array

    freq = take("<f8", (header["n_freqs"],)).copy()
    time = take("<f8", (header["n_frames"],)).copy()
    planes = {}
    for plane in header["planes"]:
        array = take(plane["dtype"], tuple(plane["shape"]))
        planes[plane["name"]] = array.astype(np.complex128 if plane["dtype"] == "<c8" else np.float64)

    kind = SpectrogramKind(header["kind"])
    values = planes.pop("values")
    if kind == SpectrogramKind.MASK:
        values = values.astype(np.uint8)
    elif kind == SpectrogramKind.LABELS:
        values = values.astype(np.int32)
    spec = Spectrogram(
        values=values,
        kind=kind,
        freq_axis_hz=freq,
        time_axis_ms=time,
        window_len=header["window_len"],
        hop=header["hop"],
        sample_rate_hz=header["sample_rate_hz"],
        guard_bins=header["guard_bins"],
        channel_id=header["channel_id"],
        meta=header.get("spectrogram_meta", {}),
    )
    return Container(spectrogram=spec, planes=planes, meta=header.get("meta", {}))
