import json
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import signal

from tfmodes.errors import AxisMismatchError, InvalidSpecError
from tfmodes.ingest import load_channel, load_manifest
from tfmodes.synth import (
    ComponentClass,
    decode_support,
    encode_support,
    generate_shot,
    load_truth,
    score_detection,
    validate_spec,
    write_shot,
)
from tfmodes.tfa import SpectrogramKind
from tests.conftest import FS, make_spec


def _short_shot(**overrides):
    spec = {
        "duration_s": 0.02,
        "sample_rate_hz": FS,
        "channels": 3,
        "seed": 11,
        "shot_id": "s1",
        "tones": [{"f0_hz": 60_000.0, "f1_hz": 60_000.0, "t_start_s": 0.004, "t_end_s": 0.016, "amplitude": 2.0}],
        "noise": {"sigma": 0.5},
    }
    spec.update(overrides)
    return spec


def _labels_from(truth, *classes):
    values = truth.support_mask(*classes).astype(np.int32)
    return make_spec(values, kind=SpectrogramKind.LABELS, window_len=truth.window_len, hop=truth.hop,
                     fs=truth.sample_rate_hz)


def test_same_seed_same_samples():
    a, truth_a = generate_shot(_short_shot())
    b, truth_b = generate_shot(_short_shot())
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)
    assert truth_a == truth_b
    c, _ = generate_shot(_short_shot(seed=12))
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_channels_share_tones_but_not_noise():
    series, _ = generate_shot(_short_shot())
    assert [s.channel_id for s in series] == ["ch0", "ch1", "ch2"]
    assert not np.array_equal(series[0].samples, series[1].samples)

    quiet, _ = generate_shot(_short_shot(noise={"sigma": [0.0, 0.0, 1.0]}))
    np.testing.assert_array_equal(quiet[0].samples, quiet[1].samples)
    t = np.arange(quiet[0].samples.size) / FS
    active = (t >= 0.004) & (t < 0.016)
    expected = np.where(active, 2.0 * np.sin(2 * np.pi * 60_000.0 * (t - 0.004)), 0.0)
    np.testing.assert_allclose(quiet[0].samples, expected, atol=1e-9)


def test_support_runs():
    mask = np.zeros((5, 2), dtype=bool)
    mask[[1, 2, 4], 0] = True
    mask[0, 1] = True
    runs = encode_support(mask)
    assert runs == [(0, 1, 2), (0, 4, 1), (1, 0, 1)]
    np.testing.assert_array_equal(decode_support(runs, mask.shape), mask)


def test_tone_support_follows_frequency():
    _, truth = generate_shot(_short_shot())
    assert truth.shape == (513, (10_000 - 1024) // 128 + 1)
    tone = truth.support_mask(ComponentClass.COHERENT)
    rows = np.flatnonzero(tone.any(axis=1))
    # 60 kHz / (FS / 1024) = 122.88
    assert rows.tolist() == [122, 123]
    centers = (np.arange(truth.n_frames) * 128 + 512) / FS
    np.testing.assert_array_equal(tone.any(axis=0), (centers >= 0.004) & (centers < 0.016))
    (component,) = [c for c in truth.components if c.component_class == ComponentClass.COHERENT]
    assert component.channels == [0, 1, 2]
    assert component.energy == pytest.approx(0.5 * 4.0 * 6000)


def test_channel_noise_is_uncorrelated():
    series, _ = generate_shot(_short_shot(
        tones=[], channels=4, duration_s=0.2, noise={"sigma": 1.0}, background={"chi": 1.0, "amplitude": 0.5},
    ))
    rho = np.corrcoef(np.stack([s.samples for s in series]))
    off_diagonal = rho[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off_diagonal)) < 0.02


def test_noise_kinds_have_requested_sigma():
    for kind in ("gaussian", "laplacian", "uniform"):
        series, _ = generate_shot(_short_shot(tones=[], channels=1, duration_s=0.2, noise={"kind": kind, "sigma": 2.0}))
        assert np.std(series[0].samples) == pytest.approx(2.0, rel=0.03)


def test_background_follows_power_law():
    series, truth = generate_shot(_short_shot(
        tones=[], channels=1, duration_s=0.1, noise={"sigma": 0.0},
        background={"chi": 2.0, "amplitude": 1.0},
    ))
    f, pxx = signal.welch(series[0].samples, fs=FS, nperseg=1024)
    band = (f >= 10_000) & (f <= 200_000)
    slope = np.polyfit(np.log10(f[band]), np.log10(pxx[band]), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.2)
    (bg,) = [c for c in truth.components if c.component_class == ComponentClass.BROAD]
    assert bg.energy == pytest.approx(float(np.sum(series[0].samples ** 2)))


def test_quasi_coherent_band_and_transient_truth():
    _, truth = generate_shot(_short_shot(
        qc_bands=[{"center_hz": 100_000.0, "bandwidth_hz": 20_000.0, "amplitude": 1.0}],
        transients=[{"t_s": 0.01, "width_s": 0.0002, "amplitude": 10.0}],
    ))
    qc = truth.support_mask(ComponentClass.QUASI_COHERENT)
    rows = np.flatnonzero(qc.any(axis=1))
    df = FS / 1024
    assert rows[0] == int(np.floor(90_000 / df))
    assert rows[-1] == int(np.ceil(110_000 / df))
    assert truth.transient_frames == [35]
    burst = truth.support_mask(ComponentClass.TRANSIENT)
    assert burst[:, 35].sum() == 513 - 9
    assert not burst[:9].any()


def _qc_welch(kind):
    series, _ = generate_shot(_short_shot(
        tones=[], channels=1, duration_s=0.1, noise={"sigma": 0.0},
        qc_bands=[{"center_hz": 100_000.0, "bandwidth_hz": 20_000.0, "amplitude": 1.0, "filter": kind}],
    ))
    return series[0].samples, signal.welch(series[0].samples, fs=FS, nperseg=1024)


@pytest.mark.parametrize("kind", ["spectral", "bandpass"])
def test_qc_band_power_peaks_inside_band(kind):
    samples, (f, pxx) = _qc_welch(kind)
    assert 90_000 <= f[np.argmax(pxx)] <= 110_000
    assert np.std(samples) == pytest.approx(1.0, rel=1e-6)


def test_spectral_qc_band_stays_inside_nominal_band():
    def leakage(kind):
        _, (f, pxx) = _qc_welch(kind)
        inside = np.median(pxx[np.abs(f - 100_000.0) <= 10_000.0])
        return pxx[np.abs(f - 100_000.0) >= 10_000.0 + 5 * FS / 1024].max() / inside

    assert leakage("spectral") < 1e-3
    assert leakage("bandpass") > 1e-2


@pytest.mark.parametrize("changes", [
    {"tones": [{"f0_hz": 1e3, "f1_hz": 1e3, "t_start_s": 0.01, "t_end_s": 0.005, "amplitude": 1.0}]},
    {"tones": [{"f0_hz": 1e3, "f1_hz": 1e3, "t_start_s": 0.0, "t_end_s": 0.5, "amplitude": 1.0}]},
    {"tones": [{"f0_hz": 3e5, "f1_hz": 1e3, "t_start_s": 0.0, "t_end_s": 0.01, "amplitude": 1.0}]},
    {"noise": {"sigma": -1.0}},
    {"noise": {"sigma": [1.0, 1.0]}},
    {"qc_bands": [{"center_hz": 245_000.0, "bandwidth_hz": 20_000.0, "amplitude": 1.0}]},
    {"duration_s": 0.001},
])
def test_invalid_shot_is_rejected(changes):
    with pytest.raises(InvalidSpecError):
        generate_shot(_short_shot(**changes))


def test_write_shot_round_trips(tmp_path):
    manifest_path = write_shot(_short_shot(), tmp_path)
    manifest = load_manifest(manifest_path)
    assert manifest.shot_id == "s1"
    assert len(manifest.channels) == 3
    series = load_channel(manifest.channels[0].data, manifest.channels[0].sidecar)
    assert series.samples.size == 10_000
    assert series.sample_rate_hz == FS
    truth = load_truth(tmp_path / "truth.json")
    assert truth == generate_shot(_short_shot())[1]
    assert json.loads((tmp_path / "truth.json").read_text())["window_len"] == 1024


def test_perfect_labels_score_one():
    _, truth = generate_shot(_short_shot())
    labels = _labels_from(truth, ComponentClass.COHERENT)
    scores = score_detection(truth, labels, [SimpleNamespace(label=1, kind="coherent")])
    assert scores["tone"].recall == 1.0
    assert scores["tone"].precision == 1.0
    assert scores["tone"].f1 == 1.0
    assert scores["transient"].no_predictions


def test_one_bin_offset_is_tolerated():
    _, truth = generate_shot(_short_shot())
    shifted = np.roll(truth.support_mask(ComponentClass.COHERENT), 1, axis=0).astype(np.int32)
    labels = make_spec(shifted, kind=SpectrogramKind.LABELS, window_len=1024, hop=128, fs=FS)
    score = score_detection(truth, labels, [SimpleNamespace(label=1, kind="coherent")])["tone"]
    assert score.recall == 1.0 and score.precision == 1.0

    far = np.roll(truth.support_mask(ComponentClass.COHERENT), 5, axis=0).astype(np.int32)
    labels = labels.with_values(far, SpectrogramKind.LABELS)
    assert score_detection(truth, labels, [SimpleNamespace(label=1, kind="coherent")])["tone"].recall == 0.0


def test_empty_prediction_is_flagged():
    _, truth = generate_shot(_short_shot())
    labels = _labels_from(truth, ComponentClass.TRANSIENT)
    score = score_detection(truth, labels, [])["coherent"]
    assert score.no_predictions
    assert score.recall == 0.0
    assert score.precision == 1.0


def test_grid_mismatch_is_rejected():
    _, truth = generate_shot(_short_shot())
    labels = make_spec(np.zeros((257, truth.n_frames), dtype=np.int32), kind=SpectrogramKind.LABELS, hop=128)
    with pytest.raises(AxisMismatchError):
        score_detection(truth, labels, [])
    whitened = _labels_from(truth).with_values(np.zeros(truth.shape), SpectrogramKind.WHITENED)
    with pytest.raises(AxisMismatchError):
        score_detection(truth, whitened, [])


def test_validate_spec_accepts_models():
    spec = validate_spec(_short_shot())
    assert validate_spec(spec) == spec
    assert spec.n_samples == 10_000
