"""Audio ingestion and log-mel features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

N_MELS = 40
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
WINDOW_SECONDS = 0.022
CACHE_MAGIC = b"SEDF"
CACHE_VERSION = 1


class WavError(ValueError):
    """Malformed or unsupported WAV data; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if np.asarray(self.samples).ndim != 1:
            raise ValueError("audio clip must be mono")


def read_wav(path) -> AudioClip:
    """PCM16 RIFF/WAVE reader; stereo is averaged to mono."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavError("file too short for a RIFF header", 0)
    if raw[:4] != b"RIFF":
        raise WavError(f"expected 'RIFF', found {raw[:4]!r}", 0)
    if raw[8:12] != b"WAVE":
        raise WavError(f"expected 'WAVE', found {raw[8:12]!r}", 8)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = pos + 8
        if body + size > len(raw):
            raise WavError(f"chunk {cid!r} declares {size} bytes past end of file", pos + 4)
        if cid == b"fmt ":
            if size < 16:
                raise WavError("fmt chunk shorter than 16 bytes", pos + 4)
            fmt = struct.unpack_from("<HHIIHH", raw, body) + (body,)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk", pos)
    if data is None:
        raise WavError("missing data chunk", pos)
    codec, channels, rate, _, align, bits, fmt_at = fmt
    if codec != 1:
        raise WavError(f"unsupported codec {codec} (only PCM=1)", fmt_at)
    if bits != 16:
        raise WavError(f"unsupported sample width {bits} bits (only 16)", fmt_at + 14)
    if channels not in (1, 2):
        raise WavError(f"unsupported channel count {channels}", fmt_at + 2)
    start, size = data
    n = size // (2 * channels)
    pcm = np.frombuffer(raw, dtype="<i2", count=n * channels, offset=start).astype(np.float64)
    pcm = pcm.reshape(n, channels).mean(axis=1) / 32768.0
    return AudioClip(pcm, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    Path(path).write_bytes(header + body)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray   # [n_mels, n_bins]
    sample_rate: int
    breakpoints_hz: np.ndarray   # n_mels + 2 points

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def build_mel_filterbank(sample_rate: int, n_bins: int, n_mels: int = N_MELS,
                         fmin: float = 0.0, fmax=None, n_fft=None) -> MelFilterbank:
    """Triangular filters with unit peaks over ``n_bins`` one-sided DFT bins.

    Bin ``k`` sits at ``k * sample_rate / n_fft``; ``n_fft`` defaults to the
    even size ``2 * (n_bins - 1)``.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    if n_fft is None:
        n_fft = 2 * (n_bins - 1)
    if n_fft // 2 + 1 != n_bins:
        raise ValueError(f"{n_bins} bins do not belong to a {n_fft}-point DFT")
    return _filterbank(sample_rate, np.arange(n_bins) * sample_rate / n_fft, n_mels, fmin, fmax)


def _filterbank(sample_rate, bin_hz, n_mels, fmin, fmax) -> MelFilterbank:
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    w = np.zeros((n_mels, bin_hz.size))
    for k in range(n_mels):
        lo, mid, hi = pts[k], pts[k + 1], pts[k + 2]
        rise = (bin_hz - lo) / (mid - lo)
        fall = (hi - bin_hz) / (hi - mid)
        w[k] = np.maximum(0.0, np.minimum(rise, fall))
        if not np.any(w[k] > 0):
            raise ValueError(
                f"mel filter {k} ({lo:.1f}-{hi:.1f} Hz) covers no FFT bin; "
                f"the spectrum resolution is too coarse for {n_mels} bands")
    return MelFilterbank(w, sample_rate, pts)


def window_length(sample_rate: int) -> int:
    return int(round(WINDOW_SECONDS * sample_rate))


def hamming(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def filterbank_for(sample_rate: int, n_mels: int = N_MELS) -> MelFilterbank:
    """Filterbank matching the DFT size :func:`stft_logmel` uses at ``sample_rate``."""
    n = window_length(sample_rate)
    return build_mel_filterbank(sample_rate, n // 2 + 1, n_mels, n_fft=n)


def power_frames(clip: AudioClip) -> Tuple[np.ndarray, int]:
    """|DFT|^2 of Hamming-windowed frames, DFT length equal to the window length."""
    n = window_length(clip.sample_rate)
    hop = n // 2
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < n:
        raise ValueError(f"clip has {x.size} samples, shorter than one {n}-sample window")
    n_frames = 1 + (x.size - n) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hamming(n), n=n, axis=1)
    return np.abs(spec) ** 2, hop


@dataclass
class FeatureMatrix:
    values: np.ndarray   # [T, F]
    frame_hop_seconds: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")


def stft_logmel(clip: AudioClip, fb: MelFilterbank = None) -> FeatureMatrix:
    """Log mel energies: 22 ms Hamming frames, 50% overlap, no zero padding."""
    if fb is None:
        fb = filterbank_for(clip.sample_rate)
    power, hop = power_frames(clip)
    if fb.weights.shape[1] != power.shape[1]:
        raise ValueError(f"filterbank has {fb.weights.shape[1]} bins, spectrum has {power.shape[1]}")
    mel = power @ fb.weights.T
    return FeatureMatrix(np.log(mel + LOG_FLOOR), hop / clip.sample_rate)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def fit_standardizer(training: Sequence[np.ndarray]) -> Standardizer:
    """Per-feature mean/std over all frames of the training split."""
    rows = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1, np.shape(m)[-1]) for m in training])
    mean = rows.mean(axis=0)
    # a constant column's float mean can miss the value by an ulp; pin it
    const = rows.max(axis=0) == rows.min(axis=0)
    mean = np.where(const, rows[0], mean)
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return Standardizer(mean, std)


def apply_standardizer(s: Standardizer, fm: FeatureMatrix) -> FeatureMatrix:
    return FeatureMatrix(s.apply(fm.values), fm.frame_hop_seconds)


def segment_sequences(features: np.ndarray, roll: np.ndarray, T: int = 1024):
    """Cut into non-overlapping ``T``-frame pieces; the tail is zero-padded.

    Returns a list of ``(features [T, F], roll [T, C], valid [T])`` triples.
    """
    features = np.asarray(features)
    roll = np.asarray(roll)
    if features.shape[0] != roll.shape[0]:
        raise ValueError(f"features have {features.shape[0]} frames, roll has {roll.shape[0]}")
    total = features.shape[0]
    out = []
    for start in range(0, total, T):
        n = min(T, total - start)
        x = np.zeros((T,) + features.shape[1:], dtype=features.dtype)
        y = np.zeros((T,) + roll.shape[1:], dtype=roll.dtype)
        x[:n] = features[start:start + n]
        y[:n] = roll[start:start + n]
        valid = np.zeros(T, dtype=bool)
        valid[:n] = True
        out.append((x, y, valid))
    return out


def write_feature_cache(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    T, F = values.shape
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, T, F) + values.tobytes())


def read_feature_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache (magic {raw[:4]!r})")
    version, T, F = struct.unpack_from("<III", raw, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    expected = 16 + 4 * T * F
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {T}x{F}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, F).copy()
