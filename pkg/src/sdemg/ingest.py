"""Signal containers, file readers and surrogate signal generators.

Readers cover the two on-disk sources the pipeline consumes:

* WFDB records stored in format 212 (the MIT-BIH NSR database layout).
* The canonical segment file, a small little-endian container used for every
  intermediate artifact (clean sEMG, mixtures, denoised output).

The surrogate generators produce band-limited bursty noise standing in for
sEMG and a quasi-periodic biphasic pulse train standing in for ECG, so the
whole pipeline runs without licensed datasets.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import signal

from .errors import ParameterError, SegmentFormatError, TruncatedFileError, UnsupportedFormatError

SEGMENT_MAGIC = b"SEG1"


@dataclass(frozen=True, eq=False)
class Waveform:
    """A finite 1-D sample sequence with its sampling rate."""

    samples: np.ndarray
    fs: int
    label: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ParameterError("waveform samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("waveform samples must be finite")
        fs = int(self.fs)
        if fs <= 0 or fs != self.fs:
            raise ParameterError(f"sampling rate must be a positive integer, got {self.fs}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", fs)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def replace(self, samples=None, fs=None, label=None) -> "Waveform":
        return Waveform(
            self.samples if samples is None else samples,
            self.fs if fs is None else fs,
            self.label if label is None else label,
        )


@dataclass(frozen=True)
class WfdbRecord:
    record_name: str
    channels: list
    gains: list
    baselines: list

    def __post_init__(self):
        if not (len(self.channels) == len(self.gains) == len(self.baselines)):
            raise ParameterError("channels, gains and baselines must have equal length")
        if len({w.fs for w in self.channels}) > 1:
            raise ParameterError("all channels of a record must share one sampling rate")

    @property
    def fs(self) -> int:
        return self.channels[0].fs


@dataclass(frozen=True)
class SurrogateSpec:
    kind: Literal["semg", "ecg"]
    duration_s: float
    fs: int
    seed: int = 0
    semg_band: tuple = (20.0, 450.0)
    ecg_rate_bpm: float = 72.0
    ecg_template_width_s: float = 0.08

    def __post_init__(self):
        if self.kind not in ("semg", "ecg"):
            raise ParameterError(f"unknown surrogate kind {self.kind!r}")
        if self.duration_s <= 0 or self.fs <= 0:
            raise ParameterError("duration_s and fs must be positive")
        low, high = self.semg_band
        if self.kind == "semg" and not 0 < low < high < self.fs / 2:
            raise ParameterError(f"semg_band {self.semg_band} must satisfy 0 < low < high < fs/2")
        if not 30 <= self.ecg_rate_bpm <= 180:
            raise ParameterError("ecg_rate_bpm must lie in [30, 180]")
        if self.ecg_template_width_s <= 0:
            raise ParameterError("ecg_template_width_s must be positive")


# ---------------------------------------------------------------- WFDB ----


def decode_212(data: bytes, count: int) -> np.ndarray:
    """Unpack ``count`` 12-bit two's-complement samples from format-212 bytes.

    Each 3-byte group ``(a, b, c)`` holds two samples: the first is ``a`` plus
    the low nibble of ``b`` as its top four bits, the second is ``c`` plus the
    high nibble of ``b``.
    """
    needed = 3 * (count // 2) + (2 if count % 2 else 0)
    if len(data) < needed:
        raise TruncatedFileError(f"format 212 payload holds {len(data)} bytes, need {needed}")
    raw = np.frombuffer(data[:needed], dtype=np.uint8).astype(np.int32)
    if count % 2:
        raw = np.concatenate([raw, np.zeros(1, dtype=np.int32)])
    groups = raw.reshape(-1, 3)
    out = np.empty(groups.shape[0] * 2, dtype=np.int32)
    out[0::2] = groups[:, 0] | ((groups[:, 1] & 0x0F) << 8)
    out[1::2] = groups[:, 2] | ((groups[:, 1] & 0xF0) << 4)
    out[out > 2047] -= 4096
    return out[:count]


def encode_212(values: Sequence[int]) -> bytes:
    """Pack 12-bit integers into format-212 bytes (inverse of :func:`decode_212`)."""
    vals = np.asarray(values, dtype=np.int64)
    if np.any(vals < -2048) or np.any(vals > 2047):
        raise ParameterError("format 212 holds values in [-2048, 2047]")
    u = (vals & 0xFFF).astype(np.int64)
    odd = u.size % 2
    if odd:
        u = np.concatenate([u, [0]])
    first, second = u[0::2], u[1::2]
    groups = np.stack(
        [first & 0xFF, ((first >> 8) & 0x0F) | (((second >> 8) & 0x0F) << 4), second & 0xFF],
        axis=1,
    ).astype(np.uint8)
    data = groups.tobytes()
    return data[:-1] if odd else data


def _parse_gain(field_text):
    # "200", "200/mV", "200(1024)/mV"
    spec = field_text.split("/")[0]
    baseline = None
    if "(" in spec:
        spec, rest = spec.split("(", 1)
        baseline = int(rest.rstrip(")"))
    gain = float(spec) if spec else 0.0
    return (gain if gain != 0 else 200.0), baseline


def read_wfdb(header_path) -> WfdbRecord:
    """Read a single-segment WFDB record whose signals are stored in format 212.

    Returns physical-unit channels, ``(adc - baseline) / gain``.
    """
    header_path = Path(header_path)
    if header_path.suffix != ".hea":
        header_path = header_path.with_suffix(".hea")
    lines = [
        ln.strip()
        for ln in header_path.read_text().splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise SegmentFormatError(f"{header_path}: empty header")
    head = lines[0].split()
    name = head[0]
    if "/" in name:
        raise UnsupportedFormatError("multi-segment")
    nchan = int(head[1])
    fs = int(round(float(head[2].split("/")[0].split("(")[0]))) if len(head) > 2 else 250
    nsamples = int(head[3]) if len(head) > 3 else None

    files, gains, baselines = [], [], []
    byte_offset = 0
    for ln in lines[1 : 1 + nchan]:
        parts = ln.split()
        fmt_text = parts[1]
        code = fmt_text.split("x")[0].split(":")[0].split("+")[0]
        if code != "212":
            raise UnsupportedFormatError(code)
        if "+" in fmt_text:
            byte_offset = int(fmt_text.split("+")[1])
        gain, baseline = _parse_gain(parts[2]) if len(parts) > 2 else (200.0, None)
        if baseline is None:
            baseline = int(parts[4]) if len(parts) > 4 else 0
        files.append(parts[0])
        gains.append(gain)
        baselines.append(baseline)
    if len(files) != nchan:
        raise SegmentFormatError(f"{header_path}: header declares {nchan} channels, lists {len(files)}")
    if len(set(files)) != 1:
        raise UnsupportedFormatError("multi-file")

    dat_path = header_path.parent / files[0]
    data = dat_path.read_bytes()[byte_offset:]
    if nsamples is None:
        nsamples = (len(data) * 2 // 3) // nchan
    try:
        adc = decode_212(data, nsamples * nchan).reshape(nsamples, nchan)
    except TruncatedFileError as exc:
        raise TruncatedFileError(f"{dat_path}: {exc}") from None

    channels = [
        Waveform((adc[:, k] - baselines[k]) / gains[k], fs, f"{name}:ch{k}")
        for k in range(nchan)
    ]
    return WfdbRecord(name, channels, gains, baselines)


def write_wfdb(record_name, directory, adc_channels, fs, gains, baselines) -> Path:
    """Write integer ADC channels as a format-212 record; returns the header path."""
    directory = Path(directory)
    adc = np.stack([np.asarray(c, dtype=np.int64) for c in adc_channels], axis=1)
    nsamples, nchan = adc.shape
    dat_name = f"{record_name}.dat"
    (directory / dat_name).write_bytes(encode_212(adc.reshape(-1)))
    lines = [f"{record_name} {nchan} {fs} {nsamples}"]
    for k in range(nchan):
        lines.append(f"{dat_name} 212 {gains[k]:g}({baselines[k]})/mV 12 0 0 0 0 ECG{k}")
    header = directory / f"{record_name}.hea"
    header.write_text("\n".join(lines) + "\n")
    return header


# ------------------------------------------------------ segment files ----


def write_segments(path, segments: Sequence[Waveform], fs: int | None = None) -> None:
    """Write waveforms to the canonical segment format.

    All segments must share one sampling rate. Samples are stored as
    little-endian float32.
    """
    if fs is None:
        if not segments:
            raise ParameterError("fs is required when writing an empty segment table")
        fs = segments[0].fs
    if any(w.fs != fs for w in segments):
        raise ParameterError("all segments must share the file's sampling rate")
    chunks = [SEGMENT_MAGIC, struct.pack("<II", int(fs), len(segments))]
    for w in segments:
        chunks.append(struct.pack("<I", len(w)))
        chunks.append(w.samples.astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_segments(path) -> list:
    """Read every segment of a canonical segment file."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != SEGMENT_MAGIC:
        raise SegmentFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    fs, count = struct.unpack_from("<II", blob, 4)
    pos = 12
    out = []
    for k in range(count):
        if pos + 4 > len(blob):
            raise TruncatedFileError(f"{path}: segment {k} length field missing")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        end = pos + 4 * n
        if end > len(blob):
            raise TruncatedFileError(f"{path}: segment {k} declares {n} samples, payload is short")
        samples = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float64)
        out.append(Waveform(samples, fs, f"{path.stem}[{k}]"))
        pos = end
    if pos != len(blob):
        raise SegmentFormatError(f"{path}: {len(blob) - pos} trailing bytes after last segment")
    return out


# ---------------------------------------------------------- surrogates ----


def _biphasic_template(width_s, fs):
    n = max(int(round(width_s * fs)), 2)
    half = n // 2
    up = np.sin(np.pi * (np.arange(half) + 0.5) / half)
    down = -np.sin(np.pi * (np.arange(n - half) + 0.5) / (n - half))
    return np.concatenate([up, down])


def _burst_envelope(rng, n, fs):
    env = np.empty(n)
    pos, active = 0, bool(rng.integers(2))
    while pos < n:
        dur = rng.uniform(1.0, 3.0) if active else rng.uniform(0.5, 2.0)
        stop = min(n, pos + max(1, int(dur * fs)))
        env[pos:stop] = rng.uniform(0.6, 1.0) if active else rng.uniform(0.1, 0.3)
        pos, active = stop, not active
    win = signal.windows.hann(max(3, int(0.2 * fs)))
    win /= win.sum()
    padded = np.pad(env, win.size, mode="edge")
    return np.convolve(padded, win, mode="same")[win.size : win.size + n]


def gen_surrogate(spec: SurrogateSpec) -> Waveform:
    """Generate a deterministic surrogate sEMG or ECG waveform from ``spec``."""
    n = int(round(spec.duration_s * spec.fs))
    if n < 1:
        raise ParameterError("surrogate must contain at least one sample")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "semg":
        white = rng.standard_normal(n + 2 * spec.fs)
        sos = signal.butter(6, spec.semg_band, btype="bandpass", fs=spec.fs, output="sos")
        band = signal.sosfiltfilt(sos, white)[spec.fs : spec.fs + n]
        x = band * _burst_envelope(rng, n, spec.fs)
        x -= x.mean()
    else:
        template = _biphasic_template(spec.ecg_template_width_s, spec.fs)
        period = 60.0 / spec.ecg_rate_bpm
        x = np.zeros(n)
        t = rng.uniform(0.0, period)
        while True:
            start = int(round(t * spec.fs))
            if start >= n:
                break
            seg = template[: n - start]
            x[start : start + seg.size] += seg
            t += period * (1.0 + rng.uniform(-0.05, 0.05))
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return Waveform(x, spec.fs, f"surrogate-{spec.kind}-seed{spec.seed}")
