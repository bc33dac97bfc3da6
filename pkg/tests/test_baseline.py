import logging

import numpy as np
import pytest
from scipy.linalg import solveh_banded

from tfmodes.baseline import (
    emphasis_term,
    estimate_baseline,
    fit_baseline_slice,
    fit_slices,
    guard_bin_count,
    pre_emphasize,
    robust_scale,
    solve_whittaker,
    whiten,
    whiten_complex,
)
from tfmodes.config import BaselineConfig
from tfmodes.errors import InvalidParameterError, KindMismatchError, NonFiniteError
from tfmodes.tfa import SpectrogramKind, log_power, stft
from tests.conftest import make_series, make_spec


def _power_law(chi, n_frames=40, noise_db=0.5, seed=0):
    """Log-potencia analítica 10*log10(f^-chi) con ruido gaussiano en dB sobre la rejilla N=1024."""
    rng = np.random.default_rng(seed)
    spec = make_spec(np.zeros((513, n_frames)), kind=SpectrogramKind.LOG_POWER, window_len=1024, hop=128)
    f = spec.freq_axis_hz.copy()
    f[0] = f[1]
    truth = -10.0 * chi * np.log10(f / f[1])
    values = truth[:, None] + rng.normal(0.0, noise_db, (513, n_frames))
    return spec.with_values(values, SpectrogramKind.LOG_POWER), truth


def test_pentadiagonal_solver_matches_banded_reference():
    rng = np.random.default_rng(5)
    n, lam = 60, 250.0
    w = rng.uniform(0.1, 1.0, n)
    rhs = rng.normal(size=n)
    D = np.diff(np.eye(n), 2, axis=0)
    A = np.diag(w) + lam * D.T @ D
    ab = np.zeros((3, n))
    ab[2] = np.diag(A)
    ab[1, 1:] = np.diag(A, 1)
    ab[0, 2:] = np.diag(A, 2)
    np.testing.assert_allclose(solve_whittaker(w, lam, rhs), solveh_banded(ab, rhs), rtol=1e-8, atol=1e-10)


def test_slice_fit_hugs_lower_envelope():
    n = 512
    x = np.arange(n)
    ramp = 0.02 * x - 3.0
    bumps = 20.0 * np.exp(-0.5 * ((x - 150) / 4.0) ** 2) + 15.0 * np.exp(-0.5 * ((x - 380) / 6.0) ** 2)
    v, iters, converged = fit_baseline_slice(ramp + bumps)
    assert converged
    assert iters >= 2
    far = (np.abs(x - 150) > 30) & (np.abs(x - 380) > 40)
    assert np.max(np.abs(v - ramp)[far]) < 0.1
    assert np.all(v < ramp + bumps + 0.1)


def test_fit_slices_validates_input():
    with pytest.raises(InvalidParameterError):
        fit_slices(np.zeros((3, 7)), BaselineConfig())
    bad = np.zeros((2, 16))
    bad[1, 3] = np.nan
    with pytest.raises(NonFiniteError):
        fit_slices(bad, BaselineConfig())


def test_emphasis_term_and_guard():
    f = np.arange(11) * 1000.0
    term = emphasis_term(f, alpha=2.0)
    assert term[0] == 0.0 and term[1] == 0.0
    assert term[10] == pytest.approx(20.0)
    assert guard_bin_count(f, 4.0) == 4
    assert guard_bin_count(f, 0.0) == 1
    spec, _ = _power_law(0.0, n_frames=2)
    assert pre_emphasize(spec, 1.0).guard_bins == 1


@pytest.mark.parametrize("chi", [0.5, 1.0, 2.0])
def test_power_law_slope_is_recovered(chi):
    spec, truth = _power_law(chi)
    model = estimate_baseline(spec)
    f = spec.freq_axis_hz
    band = (f >= 60_000) & (f <= 220_000)
    slope = np.polyfit(np.log10(f[band]), model.baseline[band].mean(axis=1), 1)[0]
    assert slope == pytest.approx(-10.0 * chi, abs=0.5)
    np.testing.assert_allclose(model.baseline[band].mean(axis=1), truth[band], atol=0.3)


def test_baseline_is_shift_equivariant():
    spec, _ = _power_law(1.0, n_frames=12, noise_db=2.0, seed=3)
    shifted = spec.with_values(spec.values + 37.5, SpectrogramKind.LOG_POWER)
    a = estimate_baseline(spec)
    b = estimate_baseline(shifted)
    np.testing.assert_allclose(b.baseline, a.baseline + 37.5, atol=1e-6)
    np.testing.assert_allclose(b.residual_scale, a.residual_scale, atol=1e-6)


def test_white_noise_whitens_to_unit_robust_scale():
    x = np.random.default_rng(11).normal(size=50_000)
    logp = log_power(stft(make_series(x)))
    model = estimate_baseline(logp)
    w = whiten(logp, model)
    assert w.kind == SpectrogramKind.WHITENED
    assert w.guard_bins == 9
    band = w.values[w.guard_bins:]
    np.testing.assert_allclose(robust_scale(band), 1.0, rtol=1e-9)
    assert abs(float(band.mean())) < 0.1


def test_broadband_impulse_survives_whitening():
    spec, _ = _power_law(0.0, n_frames=61, noise_db=0.5, seed=8)
    values = spec.values.copy()
    values[:, 30] += 10.0
    spec = spec.with_values(values, SpectrogramKind.LOG_POWER)
    model = estimate_baseline(spec, BaselineConfig(alpha=0.0))
    w = whiten(spec, model).values[model.guard_bins:]
    assert w[:, 30].mean() > 10.0
    others = np.delete(w, 30, axis=1).mean(axis=0)
    assert np.max(np.abs(others)) < 1.0


def test_whiten_complex_removes_baseline_from_magnitude():
    x = np.random.default_rng(2).normal(size=20_000)
    z = stft(make_series(x))
    logp = log_power(z)
    model = estimate_baseline(logp)
    flat = log_power(whiten_complex(z, model))
    np.testing.assert_allclose(flat.values, logp.values - model.baseline, atol=1e-6)
    np.testing.assert_allclose(np.angle(whiten_complex(z, model).values), np.angle(z.values))
    assert not model.without_baseline().baseline.any()
    with pytest.raises(KindMismatchError):
        whiten_complex(logp, model)


def test_unconverged_slices_are_reported(caplog):
    spec, _ = _power_law(1.0, n_frames=4)
    with caplog.at_level(logging.WARNING, logger="tfmodes.baseline"):
        model = estimate_baseline(spec, BaselineConfig(max_iters=1))
    assert not model.converged.any()
    assert "4 of 4 baseline slices" in caplog.text


def test_non_finite_log_power_is_rejected():
    spec, _ = _power_law(1.0, n_frames=3)
    values = spec.values.copy()
    values[100, 1] = np.inf
    with pytest.raises(NonFiniteError):
        estimate_baseline(spec.with_values(values, SpectrogramKind.LOG_POWER))


def test_constant_column_is_its_own_baseline():
    v, iters, converged = fit_baseline_slice(np.full(300, -17.25))
    np.testing.assert_allclose(v, -17.25, atol=1e-9)
    assert converged


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stiffer_penalty_never_adds_curvature(seed):
    rng = np.random.default_rng(seed)
    column = 10.0 * np.log10(rng.exponential(size=400)) - 0.03 * np.arange(400)
    roughness = []
    for lam in (1e3, 1e4, 1e5, 1e6, 1e7):
        v, _, _ = fit_baseline_slice(column, BaselineConfig(lam=lam))
        roughness.append(float(np.sum(np.diff(v, 2) ** 2)))
    for softer, stiffer in zip(roughness, roughness[1:]):
        assert stiffer <= softer * (1.0 + 1e-9) + 1e-12


def _log_periodogram(n_frames=24, seed=6):
    rng = np.random.default_rng(seed)
    values = 10.0 * np.log10(rng.exponential(size=(513, n_frames))) - 0.02 * np.arange(513)[:, None]
    return make_spec(values, kind=SpectrogramKind.LOG_POWER, window_len=1024, hop=128)


def test_single_slice_fit_matches_frame_by_frame_estimate():
    spec = _log_periodogram()
    plain = BaselineConfig(recenter=False, tilt_passes=0, level_median_frames=1)
    model = estimate_baseline(spec, plain)
    term = emphasis_term(spec.freq_axis_hz, plain.alpha)
    for t in (0, 7, 23):
        v, _, _ = fit_baseline_slice(spec.values[1:, t] + term[1:], plain)
        np.testing.assert_allclose(model.baseline[1:, t], v - term[1:], atol=1e-9)
    np.testing.assert_array_equal(model.baseline[0], spec.values[0])

    # recentrado y nivel mediano solo desplazan cada trama en bloque
    shifted = estimate_baseline(spec, BaselineConfig(tilt_passes=0))
    offsets = shifted.baseline - model.baseline
    assert np.max(np.ptp(offsets, axis=0)) < 1e-9
    assert np.abs(offsets).max() > 1.0


def test_time_varying_exponent_is_tracked():
    n_frames = 60
    chi = np.linspace(0.5, 2.0, n_frames)
    rng = np.random.default_rng(9)
    spec = make_spec(np.zeros((513, n_frames)), kind=SpectrogramKind.LOG_POWER, window_len=1024, hop=128)
    f = spec.freq_axis_hz.copy()
    f[0] = f[1]
    values = -10.0 * np.log10(f / f[1])[:, None] * chi[None, :] + rng.normal(0.0, 0.5, (513, n_frames))
    model = estimate_baseline(spec.with_values(values, SpectrogramKind.LOG_POWER))
    band = (f >= 20_000) & (f <= 200_000)
    slopes = np.polyfit(np.log10(f[band]), model.baseline[band], 1)[0]
    np.testing.assert_allclose(-slopes / 10.0, chi, atol=0.1)


def _background_psd(f, chi, amplitude, corner_hz=1_000.0, f_ref_hz=10_000.0):
    return amplitude ** 2 * (np.maximum(f, corner_hz) / f_ref_hz) ** (-chi) + 1.0


@pytest.mark.parametrize("chi", [0.5, 1.0, 2.0])
def test_defaults_recover_power_law_background_with_tones(chi):
    from tfmodes.synth import generate_shot

    amplitude, window_len = 300.0, 1024
    tone_hz = [50_000.0, 120_000.0, 190_000.0]
    # tonos unos 20 dB por encima del fondo local en su bin
    tones = [
        {"f0_hz": f0, "f1_hz": f0, "t_start_s": 0.0, "t_end_s": 0.5,
         "amplitude": float(np.sqrt(600.0 * _background_psd(f0, chi, amplitude) / window_len))}
        for f0 in tone_hz
    ]
    series, _ = generate_shot({
        "duration_s": 0.5, "channels": 1, "seed": 21, "tones": tones,
        "background": {"chi": chi, "amplitude": amplitude}, "noise": {"sigma": 1.0},
    })
    logp = log_power(stft(series[0]))
    model = estimate_baseline(logp)

    f = logp.freq_axis_hz
    keep = np.arange(f.size) >= model.guard_bins
    for f0 in tone_hz:
        keep &= np.abs(f - f0) > 5 * (f[1] - f[0])
    error = np.median(model.baseline, axis=1) - 10.0 * np.log10(_background_psd(f, chi, amplitude))
    error = error[keep] - error[keep].mean()
    assert np.sqrt(np.mean(error ** 2)) <= 0.5

    w = whiten(logp, model).values[keep]
    slope = np.polyfit(np.log10(f[keep]), w.mean(axis=1), 1)[0]
    assert abs(slope) <= 0.05
    assert np.median(robust_scale(w)) == pytest.approx(1.0, abs=0.1)
