import numpy as np
import pytest

from tfmodes.ingest import ChannelSeries, save_channel
from tfmodes.tfa import Spectrogram, SpectrogramKind, frequency_axis, time_axis

FS = 500_000.0


def make_series(samples, fs=FS, channel_id="ch0", shot_id="shot1", t0_ms=0.0) -> ChannelSeries:
    return ChannelSeries(
        samples=np.asarray(samples, dtype=np.float64),
        sample_rate_hz=fs,
        t0_ms=t0_ms,
        channel_id=channel_id,
        shot_id=shot_id,
    )


def make_spec(values, kind=SpectrogramKind.WHITENED, window_len=None, hop=8, fs=FS, guard_bins=0, channel_id="ch0"):
    """Espectrograma sobre una rejilla STFT coherente con el número de filas de `values`."""
    values = np.asarray(values)
    n_freqs, n_frames = values.shape
    window_len = window_len or 2 * (n_freqs - 1)
    return Spectrogram(
        values=values,
        kind=kind,
        freq_axis_hz=frequency_axis(window_len, fs),
        time_axis_ms=time_axis(n_frames, window_len, hop, fs),
        window_len=window_len,
        hop=hop,
        sample_rate_hz=fs,
        guard_bins=guard_bins,
        channel_id=channel_id,
    )


def write_series(series: ChannelSeries, directory):
    data = directory / f"{series.channel_id}.f32"
    sidecar = directory / f"{series.channel_id}.json"
    save_channel(series, data, sidecar)
    return data, sidecar


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_tone_shot():
    """Disparo corto de 4 canales: dos tonos compartidos, fondo blanco y una ráfaga."""
    return {
        "duration_s": 0.2,
        "sample_rate_hz": FS,
        "channels": 4,
        "seed": 7,
        "shot_id": "t100",
        "tones": [
            {"f0_hz": 60_000.0, "f1_hz": 60_000.0, "t_start_s": 0.02, "t_end_s": 0.18, "amplitude": 1.0},
            {"f0_hz": 140_000.0, "f1_hz": 145_000.0, "t_start_s": 0.03, "t_end_s": 0.17, "amplitude": 1.0},
        ],
        "transients": [{"t_s": 0.1, "width_s": 0.0004, "amplitude": 40.0}],
        "noise": {"kind": "gaussian", "sigma": 1.0},
    }
