"""Reconstruction and feature-fidelity metrics for denoised sEMG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError
from .ingest import Waveform

SNR_CAP_DB = 300.0
FEATURE_WINDOW_S = 0.5


def _arr(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


@dataclass(frozen=True)
class MetricsReport:
    snr_in_db: float
    snr_out_db: float
    snr_imp_db: float
    rmse: float
    rmse_arv: float
    rmse_mf_hz: float
    n_windows: int


def snr_db(clean, estimate) -> float:
    """``10 log10(sum(clean^2) / sum((estimate - clean)^2))``, capped at 300 dB."""
    c, e = _pair(clean, estimate)
    signal_energy = float(np.sum(c * c))
    if signal_energy == 0:
        raise DegenerateInputError("clean signal has zero power")
    err = float(np.sum((e - c) ** 2))
    if err == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal_energy / err))


def snr_improvement(clean, noisy, denoised) -> float:
    return snr_db(clean, denoised) - snr_db(clean, noisy)


def rmse(clean, estimate) -> float:
    c, e = _pair(clean, estimate)
    return float(np.sqrt(np.mean((e - c) ** 2)))


def _windows(w: Waveform, window_s):
    n = int(round(window_s * w.fs))
    count = len(w) // n
    return w.samples[: count * n].reshape(count, n), n


def arv_vector(w: Waveform, window_s: float = FEATURE_WINDOW_S) -> np.ndarray:
    """Average rectified value per non-overlapping window."""
    if window_s * w.fs < 1:
        raise ParameterError("ARV window must span at least one sample")
    frames, _ = _windows(w, window_s)
    return np.mean(np.abs(frames), axis=1)


def mf_vector(w: Waveform, window_s: float = FEATURE_WINDOW_S, return_flags: bool = False):
    """Mean frequency (Hz) per non-overlapping window.

    Uses the one-sided periodogram of each rectangular window with the DC bin
    excluded. Windows with no power report 0 Hz; ``return_flags`` also returns
    a boolean array marking them.
    """
    if window_s * w.fs < 8:
        raise ParameterError("MF window must span at least 8 samples")
    frames, n = _windows(w, window_s)
    spec = np.abs(np.fft.rfft(frames, axis=1)[:, 1:]) ** 2
    freqs = np.fft.rfftfreq(n, d=1.0 / w.fs)[1:]
    total = spec.sum(axis=1)
    empty = total == 0
    mf = np.zeros(frames.shape[0])
    mf[~empty] = (spec[~empty] @ freqs) / total[~empty]
    return (mf, empty) if return_flags else mf


def feature_rmse(clean_vec, est_vec) -> float:
    a = np.asarray(clean_vec, dtype=np.float64)
    b = np.asarray(est_vec, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"feature vectors differ in length: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def evaluate(clean: Waveform, noisy: Waveform, denoised: Waveform, window_s: float = FEATURE_WINDOW_S) -> MetricsReport:
    """All four criteria for one segment."""
    snr_in = snr_db(clean, noisy)
    snr_out = snr_db(clean, denoised)
    arv_c, arv_d = arv_vector(clean, window_s), arv_vector(denoised, window_s)
    mf_c, mf_d = mf_vector(clean, window_s), mf_vector(denoised, window_s)
    return MetricsReport(
        snr_in_db=snr_in,
        snr_out_db=snr_out,
        snr_imp_db=snr_out - snr_in,
        rmse=rmse(clean, denoised),
        rmse_arv=feature_rmse(arv_c, arv_d),
        rmse_mf_hz=feature_rmse(mf_c, mf_d),
        n_windows=int(arv_c.size),
    )
