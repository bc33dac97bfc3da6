import json

import numpy as np
import pytest
from scipy import signal

from tfmodes.config import DecimationConfig
from tfmodes.errors import (
    CorruptSamplesError,
    MissingMetadataError,
    NonIntegerFactorError,
    SeriesTooShortError,
    UnsupportedEncodingError,
)
from tfmodes.ingest import (
    antialias_sos,
    decimate,
    load_channel,
    load_manifest,
    plan_decimation,
    read_sidecar,
    require_length,
)
from tests.conftest import make_series, write_series


def _sidecar(path, **overrides):
    meta = {"sample_rate_hz": 1e6, "t0_ms": 0.0, "channel_id": "ch0", "shot_id": "s1"}
    meta.update(overrides)
    path.write_text(json.dumps(meta))
    return path


def test_save_and_load_channel(tmp_path):
    samples = np.arange(-8, 8, dtype=np.float32) / 4
    series = make_series(samples, fs=1e6, t0_ms=12.5)
    data, sidecar = write_series(series, tmp_path)
    loaded = load_channel(data, sidecar)
    np.testing.assert_array_equal(loaded.samples, samples.astype(np.float64))
    assert loaded.samples.dtype == np.float64
    assert loaded.sample_rate_hz == 1e6
    assert loaded.t0_ms == 12.5
    assert loaded.channel_id == "ch0"


def test_missing_sidecar_fields(tmp_path):
    np.zeros(4, dtype="<f4").tofile(tmp_path / "x.f32")
    sidecar = tmp_path / "x.json"
    sidecar.write_text(json.dumps({"t0_ms": 0.0, "channel_id": "c", "shot_id": "s"}))
    with pytest.raises(MissingMetadataError):
        load_channel(tmp_path / "x.f32", sidecar)
    with pytest.raises(MissingMetadataError):
        read_sidecar(tmp_path / "absent.json")


def test_non_finite_sample_reports_index(tmp_path):
    data = tmp_path / "x.f32"
    np.array([0.0, 1.0, np.nan, 2.0], dtype="<f4").tofile(data)
    with pytest.raises(CorruptSamplesError) as err:
        load_channel(data, _sidecar(tmp_path / "x.json"))
    assert err.value.index == 2


def test_truncated_and_mismatched_files(tmp_path):
    data = tmp_path / "x.f32"
    data.write_bytes(b"\x00" * 10)
    with pytest.raises(CorruptSamplesError):
        load_channel(data, _sidecar(tmp_path / "x.json"))

    np.zeros(8, dtype="<f4").tofile(data)
    with pytest.raises(CorruptSamplesError):
        load_channel(data, _sidecar(tmp_path / "y.json", n_samples=9))


def test_unsupported_encoding(tmp_path):
    np.zeros(8, dtype="<f4").tofile(tmp_path / "x.f32")
    with pytest.raises(UnsupportedEncodingError):
        load_channel(tmp_path / "x.f32", _sidecar(tmp_path / "x.json", encoding="int16be"))


def test_manifest_paths_are_relative_to_manifest(tmp_path):
    (tmp_path / "shot").mkdir()
    manifest = tmp_path / "shot" / "manifest.json"
    manifest.write_text(json.dumps({"shot_id": "s1", "channels": [{"data": "a.f32", "sidecar": "a.json"}]}))
    loaded = load_manifest(manifest)
    assert loaded.shot_id == "s1"
    assert loaded.channels[0].data == str(tmp_path / "shot" / "a.f32")


def test_plan_decimation_requires_integer_factor():
    assert plan_decimation(2e6, 5e5).factor == 4
    with pytest.raises(NonIntegerFactorError):
        plan_decimation(1e6, 3e5)
    with pytest.raises(NonIntegerFactorError):
        plan_decimation(1e5, 5e5)


def test_decimate_passes_low_tone_within_one_percent():
    fs = 1e6
    t = np.arange(200_000) / fs
    series = make_series(np.sin(2 * np.pi * 10_000 * t), fs=fs)
    out = decimate(series, 5e5)
    assert out.sample_rate_hz == 5e5
    assert out.samples.size == 100_000
    middle = out.samples[10_000:-10_000]
    expected = np.sin(2 * np.pi * 10_000 * t[::2])[10_000:-10_000]
    np.testing.assert_allclose(middle, expected, atol=0.01)


def test_decimate_rejects_aliasing_tone():
    fs = 1e6
    t = np.arange(200_000) / fs
    out = decimate(make_series(np.sin(2 * np.pi * 300_000 * t), fs=fs), 5e5)
    assert np.max(np.abs(out.samples[10_000:-10_000])) < 1e-3


def test_antialias_passband_ripple_is_centered():
    plan = plan_decimation(1e6, 5e5, DecimationConfig())
    w, h = signal.sosfreqz(antialias_sos(plan), worN=4096)
    passband = np.abs(h[w < 0.7 * np.pi * 0.8 / plan.factor])
    gain_db = 20 * np.log10(passband)
    assert np.max(gain_db) <= 0.026
    assert np.min(gain_db) >= -0.026


def test_factor_one_is_identity():
    series = make_series(np.ones(64))
    assert decimate(series, series.sample_rate_hz) is series


def test_short_series():
    with pytest.raises(SeriesTooShortError):
        decimate(make_series(np.ones(20), fs=1e6), 5e5)
    with pytest.raises(SeriesTooShortError):
        require_length(make_series(np.ones(2047)), 1024)
    assert require_length(make_series(np.ones(2048)), 1024).samples.size == 2048
