"""16-bit PCM mono WAV read/write.

Uses the stdlib ``wave`` module for the RIFF framing and numpy for the
sample conversion. Only mono 16-bit files at the project sample rate are
accepted; anything else is rejected rather than silently resampled.
"""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import DataError

PCM_SCALE = 32767.0


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    """Write a float waveform (nominal range [-1, 1]) as 16-bit PCM mono."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DataError(f"write_wav expects a mono 1-D signal, got shape {samples.shape}")
    clipped = np.clip(samples, -1.0, 1.0)
    pcm = np.round(clipped * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path, expected_rate: int = 16000) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV; returns (float64 samples in [-1, 1], rate).

    Rejects multichannel, non-16-bit, and wrong-sample-rate files: there is
    no resampler at this layer.
    """
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (OSError, wave.Error) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / PCM_SCALE, rate
