"""
Jerarquía de errores del paquete. Cada etapa lanza subclases de TfModesError
para que el pipeline pueda atribuir el fallo a un canal concreto.
"""
from typing import Optional, Tuple


class TfModesError(Exception):
    """Base de todos los errores de tfmodes."""


# --- Ingesta ---

class MissingMetadataError(TfModesError):
    pass


class CorruptSamplesError(TfModesError):
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class UnsupportedEncodingError(TfModesError):
    pass


class NonIntegerFactorError(TfModesError):
    def __init__(self, input_rate_hz: float, output_rate_hz: float):
        super().__init__(
            f"{input_rate_hz} Hz is not an integer multiple of {output_rate_hz} Hz"
        )
        self.input_rate_hz = input_rate_hz
        self.output_rate_hz = output_rate_hz


class SeriesTooShortError(TfModesError):
    def __init__(self, length: int, required: int, what: str = "series"):
        super().__init__(f"{what} has {length} samples, at least {required} required")
        self.length = length
        self.required = required


# --- Espectrogramas ---

class KindMismatchError(TfModesError):
    def __init__(self, expected, actual):
        expected_names = ", ".join(str(getattr(k, "value", k)) for k in _as_tuple(expected))
        super().__init__(f"expected spectrogram kind {expected_names}, got {getattr(actual, 'value', actual)}")
        self.expected = expected
        self.actual = actual


class DimMismatchError(TfModesError):
    def __init__(self, expected: Tuple[int, ...], actual: Tuple[int, ...], what: str = "dims"):
        super().__init__(f"{what} mismatch: expected {tuple(expected)}, got {tuple(actual)}")
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class AxisMismatchError(TfModesError):
    pass


# --- Línea base ---

class SingularSystemError(TfModesError):
    pass


class NonFiniteError(TfModesError):
    pass


# --- Denoising ---

class BlockTooLargeError(TfModesError):
    def __init__(self, block: int, frames: int):
        super().__init__(f"block of {block} frames exceeds the {frames} available")
        self.block = block
        self.frames = frames


class NeedTwoChannelsError(TfModesError):
    pass


# --- Umbral ---

class DegenerateDistributionError(TfModesError):
    pass


# --- Síntesis, parámetros y salida ---

class InvalidSpecError(TfModesError):
    pass


class InvalidParameterError(TfModesError):
    pass


class OutputError(TfModesError):
    pass


def _as_tuple(value) -> tuple:
    if isinstance(value, (tuple, list, set, frozenset)):
        return tuple(value)
    return (value,)
