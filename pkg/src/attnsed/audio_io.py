"""Mono 16-bit PCM WAV reading and writing (44.1 kHz pipeline)."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .errors import FormatError

INT16_FULL_SCALE = 32767.0


def write_wav(path, samples: np.ndarray, sample_rate: int = 44100) -> None:
    """Write float samples in [-1, 1] as mono 16-bit PCM."""
    clipped = np.clip(samples, -1.0, 1.0)
    pcm = np.round(clipped * INT16_FULL_SCALE).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV; returns (float32 samples in [-1,1], rate)."""
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise FormatError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype != np.int16:
        raise FormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float32) / INT16_FULL_SCALE, int(rate)
