"""Log mel-filterbank feature extraction.

Audio at 44.1 kHz is cut into 40 ms frames every 20 ms, Hann-windowed, and
run through a magnitude FFT (n_fft 2048). 128 triangular mel filters between
300 Hz and 22050 Hz produce per-frame energies, stored as log(x + 1e-10).
A 30 s clip gives exactly 1500 frames, which the model later reduces to
375 output segments.

Normalization statistics (per-coefficient mean/std pooled over a training
corpus) live in NormStats and are applied identically at train and eval
time. Everything here is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParameterError

SAMPLE_RATE = 44100
FRAME_LEN_S = 0.040
FRAME_SHIFT_S = 0.020
FRAME_LEN = int(round(FRAME_LEN_S * SAMPLE_RATE))      # 1764 samples
FRAME_SHIFT = int(round(FRAME_SHIFT_S * SAMPLE_RATE))  # 882 samples
N_FFT = 2048
N_MELS = 128
F_MIN = 300.0
F_MAX = 22050.0
LOG_FLOOR = 1e-10

FBNK_MAGIC = b"FBNK"


@dataclass
class FeatureMatrix:
    """T x 128 log-mel energies plus the framing geometry that produced them."""

    frames: np.ndarray
    frame_shift_s: float = FRAME_SHIFT_S
    frame_len_s: float = FRAME_LEN_S
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FormatError(f"feature matrix must be T x {N_MELS}, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormStats:
    """Per-coefficient mean and std fitted on the training corpus only."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_MELS, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_MELS, np.float32))


def hz_to_mel(f) -> np.ndarray:
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ParameterError("frequency must be >= 0")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def build_mel_filterbank(n_filters: int = N_MELS, f_min: float = F_MIN,
                         f_max: float = F_MAX, n_fft: int = N_FFT,
                         sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with centers equally spaced on the mel axis.

    Returns an (n_filters, n_fft//2 + 1) matrix. Each row is a triangle
    rising from center k-1 to center k and falling to center k+1,
    evaluated at the FFT bin frequencies, peak value 1.
    """
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ParameterError(f"need 0 <= f_min < f_max <= nyquist, got {f_min}..{f_max}")
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(n_bins) * (sample_rate / n_fft)

    # centers must land in distinct FFT bins or neighboring triangles collapse
    bin_of = np.floor(hz_pts / (sample_rate / n_fft)).astype(int)
    if len(np.unique(bin_of)) != len(bin_of):
        raise ConfigError("mel center points collide in FFT-bin space; "
                          "reduce n_filters or increase n_fft")

    fb = np.zeros((n_filters, n_bins), dtype=np.float32)
    for k in range(n_filters):
        lo, mid, hi = hz_pts[k], hz_pts[k + 1], hz_pts[k + 2]
        rise = (bin_hz - lo) / (mid - lo)
        fall = (hi - bin_hz) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def filter_center_freqs(n_filters: int = N_MELS, f_min: float = F_MIN,
                        f_max: float = F_MAX) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2)
    return mel_to_hz(mel_pts[1:-1])


def frame_signal(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Slice a signal into Hann-windowed frames; returns (n_frames, 1764).

    The frame count is ceil(N / hop): the tail is zero-padded so the final
    partial frame is complete.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 1 or samples.size == 0:
        raise ParameterError("frame_signal needs a non-empty 1-D sample array")
    if sample_rate != SAMPLE_RATE:
        raise FormatError(f"unsupported sample rate {sample_rate}, expected {SAMPLE_RATE}")
    n = samples.size
    n_frames = -(-n // FRAME_SHIFT)
    padded_len = (n_frames - 1) * FRAME_SHIFT + FRAME_LEN
    padded = np.zeros(padded_len, dtype=np.float32)
    padded[:n] = samples
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_SHIFT * np.arange(n_frames)[:, None]
    window = np.hanning(FRAME_LEN).astype(np.float32)
    return padded[idx] * window


def fbank_extract(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> FeatureMatrix:
    """Raw (unnormalized) log-mel features for one clip."""
    frames = frame_signal(samples, sample_rate)
    spectrum = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    fb = _cached_filterbank()
    mel_energy = spectrum @ fb.T
    return FeatureMatrix(np.log(mel_energy + LOG_FLOOR))


_FILTERBANK = None


def _cached_filterbank() -> np.ndarray:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = build_mel_filterbank()
    return _FILTERBANK


def fit_norm_stats(features: Sequence[FeatureMatrix]) -> NormStats:
    """Pooled per-coefficient mean/std over all frames of all clips."""
    total = sum(f.n_frames for f in features)
    if total < 2:
        raise ParameterError("need at least 2 frames to fit normalization stats")
    stacked = np.concatenate([f.frames for f in features], axis=0).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def apply_norm(f: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    denom = np.maximum(stats.std, 1e-8)
    return FeatureMatrix((f.frames - stats.mean) / denom,
                         f.frame_shift_s, f.frame_len_s, f.sample_rate_hz)


# -- binary file formats -------------------------------------------------------

def save_feature_matrix(path, f: FeatureMatrix) -> None:
    """Little-endian: magic 'FBNK', u32 n_frames, u32 n_mels, f32 row-major data."""
    with open(path, "wb") as fh:
        fh.write(FBNK_MAGIC)
        header = np.array([f.n_frames, f.frames.shape[1]], dtype="<u4")
        fh.write(header.tobytes())
        fh.write(f.frames.astype("<f4").tobytes())


def load_feature_matrix(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FBNK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FBNK_MAGIC!r}")
        t, m = np.frombuffer(fh.read(8), dtype="<u4")
        data = np.frombuffer(fh.read(int(t) * int(m) * 4), dtype="<f4")
        if data.size != t * m:
            raise FormatError(f"{path}: truncated feature data")
        return FeatureMatrix(data.reshape(int(t), int(m)).copy())


def save_norm_stats(path, stats: NormStats) -> None:
    """Sidecar file: 128 f32 means then 128 f32 stds."""
    with open(path, "wb") as fh:
        fh.write(stats.mean.astype("<f4").tobytes())
        fh.write(stats.std.astype("<f4").tobytes())


def load_norm_stats(path) -> NormStats:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 2 * N_MELS:
        raise FormatError(f"{path}: expected {2 * N_MELS} floats, got {raw.size}")
    return NormStats(raw[:N_MELS].copy(), raw[N_MELS:].copy())
