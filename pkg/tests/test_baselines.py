import numpy as np
import pytest

from sdemg.baselines import (
    TsConfig,
    detect_r_peaks,
    hp_denoise,
    subtract_template,
    ts_denoise,
    ts_subtract,
)
from sdemg.errors import InsufficientBeatsError, ParameterError
from sdemg.ingest import SurrogateSpec, Waveform, gen_surrogate
from sdemg.metrics import snr_improvement
from sdemg.preprocess import mix_at_snr, prepare_ecg

FS = 1000


def hp_mag2(f, fc=40.0, order=4, fs=FS):
    return 1.0 / (1.0 + (np.tan(np.pi * fc / fs) / np.tan(np.pi * f / fs)) ** (2 * order))


def sine(freq, seconds=10.0):
    return Waveform(np.sin(2 * np.pi * freq * np.arange(int(seconds * FS)) / FS), FS)


def core_amplitude(x, freq, trim=2000):
    """Least-squares sine amplitude away from the filter edges."""
    t = np.arange(x.size)[trim:-trim] / FS
    basis = np.stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x[trim:-trim], rcond=None)
    return float(np.hypot(*coef))


def template_train(period=1000, n_beats=10, offset=500):
    t = np.arange(-40, 41) / FS
    pulse = np.where(t < 0, np.sin(np.pi * (t + 0.04) / 0.04), -0.5 * np.sin(np.pi * t / 0.04))
    x = np.zeros(period * n_beats)
    for k in range(n_beats):
        c = offset + k * period
        x[c - 40 : c + 41] += pulse
    return Waveform(x, FS)


def mixtures(n, snr=-10.0, seconds=5.0):
    out = []
    for k in range(n):
        clean = gen_surrogate(SurrogateSpec("semg", seconds, FS, seed=100 + k))
        raw = gen_surrogate(SurrogateSpec("ecg", seconds, 128, seed=200 + k, ecg_rate_bpm=60 + 3 * k))
        ecg = prepare_ecg(raw, FS)
        out.append(mix_at_snr(clean, ecg.replace(samples=ecg.samples[: len(clean)]), snr))
    return out


# ------------------------------------------------------------------- HP


def test_hp_is_linear():
    rng = np.random.default_rng(0)
    x, y = Waveform(rng.standard_normal(3000), FS), Waveform(rng.standard_normal(3000), FS)
    a, b = 1.7, -0.3
    lhs = hp_denoise(Waveform(a * x.samples + b * y.samples, FS)).samples
    rhs = a * hp_denoise(x).samples + b * hp_denoise(y).samples
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_hp_sine_responses():
    assert core_amplitude(hp_denoise(sine(10)).samples, 10) <= hp_mag2(10.0) * 1.02
    assert core_amplitude(hp_denoise(sine(200)).samples, 200) == pytest.approx(1.0, abs=0.02)


def test_hp_zero_and_rate_guard():
    assert np.all(hp_denoise(Waveform(np.zeros(500), FS)).samples == 0)
    with pytest.raises(ParameterError):
        hp_denoise(Waveform(np.zeros(100), 80))


# ------------------------------------------------------------- detection


def test_detect_ecg_at_60_bpm():
    w = gen_surrogate(SurrogateSpec("ecg", 10.0, FS, seed=1, ecg_rate_bpm=60))
    peaks = detect_r_peaks(w)
    assert abs(len(peaks) - 10) <= 1
    rr = np.diff(peaks) / FS
    assert np.all(np.abs(rr - 1.0) <= 0.1)
    assert np.array_equal(peaks, np.sort(peaks))
    assert np.array_equal(peaks, detect_r_peaks(w.replace()))


def test_pure_semg_triggers_fallback():
    fell_back = 0
    for seed in range(20):
        w = gen_surrogate(SurrogateSpec("semg", 5.0, FS, seed=seed))
        try:
            peaks = detect_r_peaks(w)
        except InsufficientBeatsError:
            fell_back += 1
            continue
        # anything accepted must be fewer beats than a 40 bpm rhythm would give
        assert len(peaks) < 5.0 * 40 / 60
    assert fell_back >= 18


def test_fallback_equals_hp():
    w = gen_surrogate(SurrogateSpec("semg", 5.0, FS, seed=3))
    out = ts_denoise(w)
    assert out.label.endswith("|ts-fallback")
    assert np.array_equal(out.samples, hp_denoise(w).samples)


def test_too_few_beats_raise():
    with pytest.raises(InsufficientBeatsError):
        detect_r_peaks(template_train(n_beats=2), TsConfig(min_beats=3))


# ----------------------------------------------------- template subtraction


def test_template_train_is_removed():
    w = template_train()
    residual = ts_subtract(w)
    assert np.sum(residual**2) <= 0.01 * np.sum(w.samples**2)
    peaks = np.arange(500, 10_000, 1000)
    for p in peaks:
        beat = slice(p - 300, p + 301)
        assert np.sum(residual[beat] ** 2) <= 0.01 * np.sum(w.samples[beat] ** 2)


def test_subtract_template_truncates_at_edges():
    template = np.arange(1.0, 6.0)
    out = subtract_template(np.zeros(10), np.array([0, 9]), template)
    np.testing.assert_array_equal(out, [-3, -4, -5, 0, 0, 0, 0, -1, -2, -3])


def test_ts_preserves_length_and_finiteness():
    for pair in mixtures(5):
        out = ts_denoise(pair.noisy)
        assert len(out) == len(pair.noisy) and np.all(np.isfinite(out.samples))


def test_baselines_improve_snr():
    pairs = mixtures(10)
    for fn in (hp_denoise, ts_denoise):
        gains = [snr_improvement(p.clean, p.noisy, fn(p.noisy)) for p in pairs]
        assert np.mean(gains) > 0
