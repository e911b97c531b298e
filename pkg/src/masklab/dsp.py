"""Time-frequency analysis/synthesis shared by every other module.

STFT conventions: no padding or centering, frames start at sample 0 and
advance by `hop`, one-sided spectra of F = window_length/2 + 1 bins.
A periodic Hann analysis window at 50% overlap satisfies COLA, so the
inverse transform is plain overlap-add divided by the summed window
envelope.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

MEL_LOG_EPS = 1e-10
DB_FLOOR = -80.0


@dataclass
class Waveform:
    """Mono PCM signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"Waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self) -> None:
        if not (0 < self.hop <= self.window_length):
            raise DataError(f"hop must satisfy 0 < hop <= window_length, got {self.hop}/{self.window_length}")
        if self.window_length % self.hop != 0:
            raise DataError(f"hop {self.hop} must divide window_length {self.window_length}")
        if self.window not in ("hann", "rect"):
            raise DataError(f"unknown window kind {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def window_samples(self) -> np.ndarray:
        n = self.window_length
        if self.window == "hann":
            # periodic Hann: exact COLA at 50% overlap
            return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
        return np.ones(n)

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise DataError(
                f"input too short: {n_samples} samples < one window ({self.window_length})"
            )
        return 1 + (n_samples - self.window_length) // self.hop

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.window_length


@dataclass
class ComplexSpectrogram:
    """T x F real/imag STFT planes plus the config that produced them."""

    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} vs imag {self.imag.shape} shape mismatch")
        if self.real.ndim != 2:
            raise ShapeError(f"spectrogram must be 2-D (T, F), got {self.real.shape}")
        if self.real.shape[1] != self.config.n_bins:
            raise ShapeError(
                f"F={self.real.shape[1]} inconsistent with window_length {self.config.window_length}"
            )
        if not (np.all(np.isfinite(self.real)) and np.all(np.isfinite(self.imag))):
            raise DataError("spectrogram contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.real.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def power(self) -> np.ndarray:
        return self.real**2 + self.imag**2


def frame_signal(x: np.ndarray, window_length: int, hop: int) -> np.ndarray:
    """Slice (..., L) samples into (..., T, window_length) frames, no padding."""
    n_frames = 1 + (x.shape[-1] - window_length) // hop
    idx = np.arange(window_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[..., idx]


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum (..., T, N) frames back into (..., (T-1)*hop + N) samples."""
    *lead, n_frames, win = frames.shape
    out = np.zeros((*lead, (n_frames - 1) * hop + win), dtype=frames.dtype)
    k = win // hop
    for off in range(min(k, n_frames)):
        sub = frames[..., off::k, :]
        m = sub.shape[-2]
        seg = out[..., off * hop : off * hop + m * win]
        seg += sub.reshape(*lead, m * win)
    return out


def ola_window_envelope(window: np.ndarray, n_frames: int, hop: int) -> np.ndarray:
    """Per-sample sum of overlapped window copies (the OLA denominator)."""
    return overlap_add(np.tile(window, (n_frames, 1)), hop)


def stft(wave: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Forward STFT; errors if the signal is shorter than one window."""
    cfg = cfg or StftConfig()
    n_frames = cfg.num_frames(len(wave))
    frames = frame_signal(wave.samples, cfg.window_length, cfg.hop)
    frames = frames * cfg.window_samples()[None, :]
    spec = np.fft.rfft(frames, axis=-1)
    assert spec.shape == (n_frames, cfg.n_bins)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), cfg, wave.sample_rate)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Inverse STFT by overlap-add with window-envelope normalization.

    Interior samples of stft(istft(...)) round-trip exactly; the first and
    last half-window carry partial overlap and are normalized by the actual
    (smaller) window sum there.
    """
    cfg = spec.config
    frames = np.fft.irfft(spec.real + 1j * spec.imag, n=cfg.window_length, axis=-1)
    num = overlap_add(frames, cfg.hop)
    den = ola_window_envelope(cfg.window_samples(), spec.shape[0], cfg.hop)
    out = np.where(den > 1e-8, num / np.where(den > 1e-8, den, 1.0), 0.0)
    return Waveform(out, spec.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int, window_length: int) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_bins).

    Rows are triangles between successive mel-spaced corner frequencies;
    every row is validated to have positive finite weight.
    """
    if n_mels < 1:
        raise DataError(f"n_mels must be >= 1, got {n_mels}")
    if n_mels > n_bins:
        raise DataError(f"n_mels {n_mels} exceeds available bins {n_bins}")
    corners = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_freqs = np.arange(n_bins) * sample_rate / window_length
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = corners[m], corners[m + 1], corners[m + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1)
    if not np.all(sums > 0):
        bad = int(np.argmin(sums))
        raise DataError(f"mel filter row {bad} has zero weight; reduce n_mels or widen the window")
    return fb


def mel_project(spec: ComplexSpectrogram, n_mels: int) -> np.ndarray:
    """Log mel-band energies, shape (T, n_mels): log(power @ fb.T + eps)."""
    fb = mel_filterbank(n_mels, spec.config.n_bins, spec.sample_rate, spec.config.window_length)
    return np.log(spec.power() @ fb.T + MEL_LOG_EPS)


def log_magnitude_db(spec: ComplexSpectrogram, floor_db: float = DB_FLOOR) -> np.ndarray:
    """Log magnitude in dB relative to the peak bin, clipped to [floor_db, 0]."""
    mag = spec.magnitude()
    peak = mag.max()
    if peak <= 0.0:
        return np.full(mag.shape, floor_db)
    db = 20.0 * np.log10(np.maximum(mag / peak, 10.0 ** (floor_db / 20.0)))
    return np.clip(db, floor_db, 0.0)


def render_spectrogram(
    spec: ComplexSpectrogram,
    path: str | Path,
    floor_db: float = DB_FLOOR,
    scale: int = 1,
    cmap: str = "magma",
) -> Path:
    """Write a PNG of the log-magnitude spectrogram.

    Pixel grid is exactly (F*scale) rows x (T*scale) cols, time left to
    right, low frequency at the bottom, fixed [floor_db, 0] dynamic range.
    """
    import matplotlib

    matplotlib.use("Agg", force=False)
    from matplotlib import image as mpimage

    db = log_magnitude_db(spec, floor_db).T  # (F, T)
    if scale > 1:
        db = np.kron(db, np.ones((scale, scale)))
    path = Path(path)
    try:
        mpimage.imsave(path, db, vmin=floor_db, vmax=0.0, cmap=cmap, origin="lower")
    except OSError as exc:
        raise DataError(f"cannot write spectrogram image {path}: {exc}") from exc
    return path
