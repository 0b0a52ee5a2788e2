"""Classical ECG-removal references: high-pass filtering and template subtraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import InsufficientBeatsError, ParameterError
from .ingest import Waveform
from .preprocess import butterworth_filter

log = logging.getLogger(__name__)

HP_CUTOFF_HZ = 40.0
HP_ORDER = 4


@dataclass(frozen=True)
class TsConfig:
    template_halfwidth_s: float = 0.3
    detect_band_hz: tuple = (10.0, 40.0)
    refractory_s: float = 0.4
    min_beats: int = 3
    # detection threshold, in multiples of the local envelope average
    threshold_factor: float = 4.0
    # local average window of the envelope
    average_window_s: float = 2.0
    # beat trains whose RR intervals vary more than this are rejected
    max_rr_cv: float = 0.15

    def __post_init__(self):
        if self.template_halfwidth_s <= 0 or self.refractory_s <= 0:
            raise ParameterError("template_halfwidth_s and refractory_s must be positive")
        if self.min_beats < 1:
            raise ParameterError("min_beats must be >= 1")


def hp_denoise(noisy: Waveform) -> Waveform:
    """Zero-phase 4th-order 40 Hz high-pass."""
    if noisy.fs <= 2 * HP_CUTOFF_HZ:
        raise ParameterError(f"high-pass baseline needs fs > {2 * HP_CUTOFF_HZ} Hz")
    return butterworth_filter(noisy, "highpass", HP_CUTOFF_HZ, HP_ORDER).replace(label=f"{noisy.label}|hp")


def _moving_average(x, n):
    return ndimage.uniform_filter1d(x, size=max(1, n), mode="nearest")


def detect_r_peaks(noisy: Waveform, cfg: TsConfig = TsConfig()) -> np.ndarray:
    """Sample indices of detected heartbeats, ascending.

    The signal is band-passed to the QRS band and squared; local maxima of the
    smoothed energy that exceed ``threshold_factor`` times its moving average
    are kept greedily by height with a refractory gap. A train that is too
    short or too irregular to be a heartbeat raises
    :class:`InsufficientBeatsError`.
    """
    fs = noisy.fs
    if len(noisy) < 2 * cfg.refractory_s * fs:
        raise ParameterError("signal shorter than two refractory periods")
    band = butterworth_filter(noisy, "bandpass", cfg.detect_band_hz, 2).samples
    energy = _moving_average(band * band, int(0.05 * fs))
    threshold = cfg.threshold_factor * _moving_average(energy, int(cfg.average_window_s * fs))

    is_max = np.r_[False, (energy[1:-1] > energy[:-2]) & (energy[1:-1] >= energy[2:]), False]
    candidates = np.flatnonzero(is_max & (energy > threshold))
    gap = int(round(cfg.refractory_s * fs))
    taken = np.zeros(len(noisy), dtype=bool)
    peaks = []
    for idx in candidates[np.argsort(-energy[candidates], kind="stable")]:
        lo, hi = max(0, idx - gap + 1), min(len(noisy), idx + gap)
        if not taken[lo:hi].any():
            taken[idx] = True
            peaks.append(idx)
    peaks = np.sort(np.asarray(peaks, dtype=np.int64))

    if peaks.size < cfg.min_beats:
        raise InsufficientBeatsError(int(peaks.size), cfg.min_beats)
    if peaks.size >= 3:
        rr = np.diff(peaks)
        if np.std(rr) / np.mean(rr) > cfg.max_rr_cv:
            raise InsufficientBeatsError(0, cfg.min_beats)
    return peaks


def _align_to_extremum(x, peaks, fs, search_s=0.05):
    # snap each energy peak to the largest absolute sample nearby
    half = int(round(search_s * fs))
    out = np.empty_like(peaks)
    for k, p in enumerate(peaks):
        lo, hi = max(0, p - half), min(x.size, p + half + 1)
        out[k] = lo + int(np.argmax(np.abs(x[lo:hi])))
    return out


def build_template(x: np.ndarray, peaks: np.ndarray, halfwidth: int) -> np.ndarray:
    """Average the epochs ``[p - halfwidth, p + halfwidth]`` that fit inside ``x``."""
    full = [p for p in peaks if p - halfwidth >= 0 and p + halfwidth < x.size]
    if not full:
        raise InsufficientBeatsError(0, 1)
    return np.mean([x[p - halfwidth : p + halfwidth + 1] for p in full], axis=0)


def subtract_template(x: np.ndarray, peaks: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Subtract ``template`` centred on every peak, truncating at the edges."""
    halfwidth = template.size // 2
    out = np.array(x, dtype=np.float64, copy=True)
    for p in peaks:
        lo, hi = p - halfwidth, p + halfwidth + 1
        t_lo, t_hi = max(0, -lo), template.size - max(0, hi - x.size)
        out[max(lo, 0) : min(hi, x.size)] -= template[t_lo:t_hi]
    return out


def ts_subtract(noisy: Waveform, cfg: TsConfig = TsConfig()) -> np.ndarray:
    """Template subtraction only, before the final high-pass stage."""
    peaks = detect_r_peaks(noisy, cfg)
    peaks = _align_to_extremum(noisy.samples, peaks, noisy.fs)
    halfwidth = int(round(cfg.template_halfwidth_s * noisy.fs))
    template = build_template(noisy.samples, peaks, halfwidth)
    return subtract_template(noisy.samples, peaks, template)


def ts_denoise(noisy: Waveform, cfg: TsConfig = TsConfig()) -> Waveform:
    """Template subtraction followed by the 40 Hz high-pass.

    Falls back to :func:`hp_denoise` when no usable beat train is found; the
    returned label then ends in ``|ts-fallback``.
    """
    try:
        residual = ts_subtract(noisy, cfg)
    except InsufficientBeatsError as exc:
        log.info("template subtraction fell back to high-pass: %s", exc)
        return hp_denoise(noisy).replace(label=f"{noisy.label}|ts-fallback")
    out = hp_denoise(noisy.replace(samples=residual))
    return out.replace(label=f"{noisy.label}|ts")
