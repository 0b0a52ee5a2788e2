"""Filtering, resampling, normalization, segmentation and SNR-controlled mixing."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

from .errors import ContractError, DegenerateInputError, ParameterError
from .ingest import Waveform

# ECG conditioning applied before any use of an interference record.
ECG_HIGHPASS_HZ = 10.0
ECG_LOWPASS_HZ = 200.0
ECG_FILTER_ORDER = 3

SEMG_BAND_HZ = (20.0, 500.0)
SEMG_FILTER_ORDER = 4


def power(x) -> float:
    """Mean squared amplitude."""
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    return float(np.mean(np.square(x)))


@dataclass(frozen=True, eq=False)
class SegmentPair:
    """A clean segment, the interference added to it and the resulting mixture."""

    clean: Waveform
    ecg: Waveform
    noisy: Waveform
    target_snr_db: float
    scale: float

    def __post_init__(self):
        n, fs = len(self.clean), self.clean.fs
        if len(self.ecg) != n or len(self.noisy) != n:
            raise ContractError("clean, ecg and noisy must have equal length")
        if self.ecg.fs != fs or self.noisy.fs != fs:
            raise ContractError("clean, ecg and noisy must share one sampling rate")


def butterworth_filter(w: Waveform, kind: str, cutoffs_hz, order: int) -> Waveform:
    """Zero-phase (forward-backward) Butterworth filter.

    ``cutoffs_hz`` is a single frequency for ``lowpass``/``highpass`` and a
    ``(low, high)`` pair for ``bandpass``.
    """
    if kind not in ("lowpass", "highpass", "bandpass"):
        raise ParameterError(f"unknown filter kind {kind!r}")
    if order < 1:
        raise ParameterError("filter order must be >= 1")
    cut = np.atleast_1d(np.asarray(cutoffs_hz, dtype=np.float64))
    expected = 2 if kind == "bandpass" else 1
    if cut.size != expected:
        raise ParameterError(f"{kind} takes {expected} cutoff(s), got {cut.size}")
    nyq = w.fs / 2
    if np.any(cut <= 0) or np.any(cut >= nyq):
        raise ParameterError(f"cutoffs {cut.tolist()} Hz must lie strictly inside (0, {nyq}) Hz")
    if kind == "bandpass" and cut[0] >= cut[1]:
        raise ParameterError("bandpass cutoffs must be increasing")
    sos = signal.butter(order, cut if kind == "bandpass" else cut[0], btype=kind, fs=w.fs, output="sos")
    # default odd padding of sosfiltfilt is too long for very short inputs
    padlen = min(3 * (2 * sos.shape[0] + 1), len(w) - 1)
    y = signal.sosfiltfilt(sos, w.samples, padlen=max(padlen, 0))
    return w.replace(samples=y)


def resample(w: Waveform, target_fs: int) -> Waveform:
    """Polyphase resampling to ``target_fs`` with built-in anti-aliasing."""
    if target_fs <= 0 or int(target_fs) != target_fs:
        raise ParameterError(f"target_fs must be a positive integer, got {target_fs}")
    target_fs = int(target_fs)
    if target_fs == w.fs:
        return w.replace()
    ratio = Fraction(target_fs, w.fs)
    y = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    n_out = int(round(len(w) * target_fs / w.fs))
    return Waveform(y[:n_out], target_fs, w.label)


def normalize_maxabs(w: Waveform):
    """Scale into [-1, 1]; returns the normalized waveform and the divisor used."""
    scale = float(np.max(np.abs(w.samples)))
    if scale == 0:
        raise DegenerateInputError("cannot normalize an all-zero signal")
    if scale == 1.0:
        return w.replace(), 1.0
    return w.replace(samples=w.samples / scale), scale


def segment(w: Waveform, seconds: float) -> list:
    """Split into consecutive non-overlapping windows; the remainder is dropped."""
    if seconds <= 0:
        raise ParameterError("segment length must be positive")
    n = int(round(seconds * w.fs))
    count = len(w) // n
    return [
        Waveform(w.samples[k * n : (k + 1) * n].copy(), w.fs, f"{w.label}#{k}")
        for k in range(count)
    ]


def mix_at_snr(clean: Waveform, ecg: Waveform, target_snr_db: float) -> SegmentPair:
    """Scale ``ecg`` so that clean-to-interference power equals ``target_snr_db``."""
    if len(clean) != len(ecg) or clean.fs != ecg.fs:
        raise ContractError("clean and ecg must have equal length and sampling rate")
    p_clean, p_ecg = power(clean), power(ecg)
    if p_clean == 0 or p_ecg == 0:
        raise DegenerateInputError("mixing needs nonzero power in both signals")
    scale = float(np.sqrt(p_clean / (p_ecg * 10.0 ** (target_snr_db / 10.0))))
    interference = ecg.samples * scale
    return SegmentPair(
        clean=clean,
        ecg=Waveform(interference, clean.fs, ecg.label),
        noisy=Waveform(clean.samples + interference, clean.fs, f"{clean.label}+{ecg.label}"),
        target_snr_db=float(target_snr_db),
        scale=scale,
    )


def prepare_semg(raw: Waveform, target_fs: int = 1000) -> Waveform:
    """Band-pass 20-500 Hz (order 4), downsample and max-abs normalize a recording."""
    high = min(SEMG_BAND_HZ[1], 0.999 * raw.fs / 2)
    x = butterworth_filter(raw, "bandpass", (SEMG_BAND_HZ[0], high), SEMG_FILTER_ORDER)
    x = resample(x, target_fs)
    return normalize_maxabs(x)[0]


def prepare_ecg(raw: Waveform, target_fs: int = 1000) -> Waveform:
    """Upsample to the sEMG rate, then high-pass 10 Hz and low-pass 200 Hz (order 3)."""
    x = resample(raw, target_fs)
    x = butterworth_filter(x, "highpass", ECG_HIGHPASS_HZ, ECG_FILTER_ORDER)
    if ECG_LOWPASS_HZ < x.fs / 2:
        x = butterworth_filter(x, "lowpass", ECG_LOWPASS_HZ, ECG_FILTER_ORDER)
    return x
