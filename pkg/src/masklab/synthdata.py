"""Deterministic synthetic corpus: speech-like harmonic clips, noise mixing
at controlled SNR, proxy MOS labels, and JSON manifests.

Every clip's randomness derives from (corpus_seed, split, index), so
generation is reproducible file-for-file regardless of ordering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import read_wav, write_wav
from .dsp import Waveform
from .errors import DataError
from .predictor import MosLabel

NOISE_KINDS = ("white", "pink", "babble", "tone500")
TONE_HZ = 500.0


@dataclass(frozen=True)
class ClipSpec:
    """Recipe for one clean clip."""

    seed: int
    duration: float = 2.0
    f0_range: tuple[float, float] = (90.0, 300.0)
    harmonics_range: tuple[int, int] = (8, 20)
    leading_pause: float = 0.5
    pitch_drift: float = 0.01
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        if not (self.duration > self.leading_pause >= 0.0):
            raise DataError(f"need duration > leading_pause >= 0, got {self.duration}/{self.leading_pause}")
        if not (0 < self.f0_range[0] <= self.f0_range[1]):
            raise DataError(f"bad f0 range {self.f0_range}")


@dataclass(frozen=True)
class DegradationSpec:
    """Noise recipe applied to a clean clip."""

    kind: str = "white"
    snr_db: float = 10.0
    clip_level: float | None = None  # hard-clip at this fraction of peak
    notch_hz: float | None = None  # zero a 200 Hz band around this frequency

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise DataError(f"unknown noise kind {self.kind!r}; known: {NOISE_KINDS}")
        if not np.isfinite(self.snr_db):
            raise DataError("snr_db must be finite")


@dataclass(frozen=True)
class ProxyMosRule:
    """Monotone map from (snr, degradation kind) to a MOS-like label.

    q = clamp(1 + 4*sigmoid((snr + kind_offset + extras - midpoint)/slope), 1, 5);
    strictly increasing in SNR for any fixed kind.
    """

    midpoint_db: float = 5.0
    slope_db: float = 7.0
    kind_offsets: dict[str, float] = field(
        default_factory=lambda: {"white": 0.0, "pink": 1.0, "babble": -2.0, "tone500": -4.0}
    )
    clip_penalty_db: float = 3.0
    notch_penalty_db: float = 2.0


def breath_noise(n_samples: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited (350-1800 Hz), slowly amplitude-modulated noise burst,
    unit RMS: a stand-in for the breath sounds real recordings carry before
    speech onset."""
    white = rng.normal(size=n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sr)
    spec[(freqs < 350.0) | (freqs > 1800.0)] = 0.0
    x = np.fft.irfft(spec, n=n_samples)
    t = np.arange(n_samples) / sr
    env = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_samples) / n_samples))  # fade in/out
    env *= 0.6 + 0.4 * np.sin(2.0 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    x *= env
    return x / max(np.sqrt(np.mean(x**2)), 1e-12)


def add_pause_breath(
    clean: Waveform, pause_seconds: float, rng: np.random.Generator, level_db: float
) -> Waveform:
    """Overlay a breath burst inside the leading pause, `level_db` below the
    RMS of the voiced part. Used for the predictor corpus only: the judge's
    training material carries this benign pause texture (as real corpora
    do), while enhancement references keep their silent lead-in."""
    sr = clean.sample_rate
    pause_n = int(round(pause_seconds * sr))
    start = int(0.1 * pause_n)
    length = int(0.8 * pause_n)
    voiced_rms = np.sqrt(np.mean(clean.samples[pause_n:] ** 2))
    breath = breath_noise(length, sr, rng) * voiced_rms * 10.0 ** (-level_db / 20.0)
    out = clean.samples.copy()
    out[start : start + length] += breath
    return Waveform(out, sr)


def _syllable_envelope(rng: np.random.Generator, n: int, sr: int, start: int) -> np.ndarray:
    """Attack/sustain/pause amplitude segments after the leading pause."""
    env = np.zeros(n)
    pos = start
    while pos < n:
        attack = int(rng.uniform(0.02, 0.06) * sr)
        sustain = int(rng.uniform(0.15, 0.40) * sr)
        release = int(rng.uniform(0.03, 0.08) * sr)
        gap = int(rng.uniform(0.03, 0.10) * sr)
        level = rng.uniform(0.6, 1.0)
        seg = np.concatenate(
            [
                np.linspace(0.0, 1.0, attack, endpoint=False),
                np.ones(sustain),
                np.linspace(1.0, 0.0, release, endpoint=False),
            ]
        )
        end = min(pos + len(seg), n)
        env[pos:end] = level * seg[: end - pos]
        pos = end + gap
    return env


def synth_clean(spec: ClipSpec) -> Waveform:
    """Harmonic tone complex with pitch drift, syllabic AM, silent lead-in."""
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    t = np.arange(n) / sr

    f0 = rng.uniform(*spec.f0_range)
    n_harm = int(rng.integers(spec.harmonics_range[0], spec.harmonics_range[1] + 1))
    drift_rate = rng.uniform(0.3, 1.2)
    drift_phase = rng.uniform(0, 2 * np.pi)
    f0_track = f0 * (1.0 + spec.pitch_drift * np.sin(2 * np.pi * drift_rate * t + drift_phase))
    phase = 2.0 * np.pi * np.cumsum(f0_track) / sr

    decay = rng.uniform(0.8, 1.4)
    sig = np.zeros(n)
    nyquist = sr / 2.0
    for k in range(1, n_harm + 1):
        if k * f0 * (1.0 + spec.pitch_drift) >= nyquist:
            break
        amp = k ** (-decay)
        sig += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    pause_n = int(round(spec.leading_pause * sr))
    env = _syllable_envelope(rng, n, sr, pause_n)
    sig *= env

    peak = np.abs(sig).max()
    if peak > 0:
        sig *= rng.uniform(0.45, 0.65) / peak
    return Waveform(sig, sr)


def make_noise(kind: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise of the requested kind."""
    if kind == "white":
        noise = rng.normal(size=n)
    elif kind == "pink":
        white = rng.normal(size=n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sr)
        spec[1:] /= np.sqrt(freqs[1:])
        spec[0] = 0.0
        noise = np.fft.irfft(spec, n=n)
    elif kind == "babble":
        # sum of random tone complexes, loosely voice-like
        t = np.arange(n) / sr
        noise = np.zeros(n)
        for _ in range(6):
            f0 = rng.uniform(100.0, 400.0)
            mod = 0.5 * (1.0 + np.sin(2 * np.pi * rng.uniform(1.5, 5.0) * t + rng.uniform(0, 2 * np.pi)))
            for k in range(1, int(rng.integers(3, 7))):
                noise += mod * k ** (-1.0) * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "tone500":
        t = np.arange(n) / sr
        noise = np.sin(2 * np.pi * TONE_HZ * t + rng.uniform(0, 2 * np.pi))
    else:
        raise DataError(f"unknown noise kind {kind!r}")
    rms = np.sqrt(np.mean(noise**2))
    return noise / max(rms, 1e-12)


def mix_at_snr(
    clean: Waveform, deg: DegradationSpec, seed: int, skip_seconds: float = 0.0
) -> Waveform:
    """Add noise scaled so the SNR over the non-pause region equals snr_db.

    The first `skip_seconds` are excluded from both energy measurements
    (the leading pause carries no signal energy by construction).
    """
    rng = np.random.default_rng(seed)
    n = len(clean)
    skip = int(round(skip_seconds * clean.sample_rate))
    if skip >= n:
        raise DataError("skip_seconds covers the whole clip")
    e_clean = float(np.sum(clean.samples[skip:] ** 2))
    if e_clean <= 0.0:
        raise DataError("clean clip has zero energy over the measured region")
    noise = make_noise(deg.kind, n, clean.sample_rate, rng)
    e_noise = float(np.sum(noise[skip:] ** 2))
    gain = np.sqrt(e_clean / (e_noise * 10.0 ** (deg.snr_db / 10.0)))
    noisy = clean.samples + gain * noise
    if deg.clip_level is not None:
        lim = deg.clip_level * np.abs(noisy).max()
        noisy = np.clip(noisy, -lim, lim)
    if deg.notch_hz is not None:
        spec = np.fft.rfft(noisy)
        freqs = np.fft.rfftfreq(n, d=1.0 / clean.sample_rate)
        spec[np.abs(freqs - deg.notch_hz) <= 100.0] = 0.0
        noisy = np.fft.irfft(spec, n=n)
    return Waveform(noisy, clean.sample_rate)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))


def proxy_mos(rule: ProxyMosRule, deg: DegradationSpec) -> MosLabel:
    """Deterministic stand-in for a human MOS label."""
    eff = deg.snr_db + rule.kind_offsets.get(deg.kind, 0.0)
    if deg.clip_level is not None:
        eff -= rule.clip_penalty_db
    if deg.notch_hz is not None:
        eff -= rule.notch_penalty_db
    q = 1.0 + 4.0 * _sigmoid((eff - rule.midpoint_db) / rule.slope_db)
    q = float(np.clip(q, 1.0, 5.0))
    return MosLabel.from_raw(q)


@dataclass(frozen=True)
class CorpusCounts:
    predictor_train: int = 500
    predictor_val: int = 100
    predictor_test: int = 100
    enh_train: int = 200
    enh_val: int = 20
    enh_test: int = 50

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value < 1:
                raise DataError(f"corpus count {name} must be >= 1, got {value}")


# split id prefix, manifest split name, per-split stream index
_PREDICTOR_SPLITS = [("pt", "train", 0), ("pv", "val", 1), ("px", "test", 2)]
_ENHANCER_SPLITS = [("et", "train", 3), ("ev", "val", 4), ("ex", "test", 5)]


def _draw_predictor_degradation(rng: np.random.Generator) -> DegradationSpec:
    kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
    snr = float(rng.uniform(-10.0, 40.0))
    clip_level = float(rng.uniform(0.3, 0.7)) if rng.random() < 0.10 else None
    notch_hz = float(rng.uniform(500.0, 3000.0)) if rng.random() < 0.10 else None
    return DegradationSpec(kind=kind, snr_db=snr, clip_level=clip_level, notch_hz=notch_hz)


def _draw_enhancer_degradation(rng: np.random.Generator) -> DegradationSpec:
    kind = rng.choice(NOISE_KINDS, p=[0.3, 0.2, 0.3, 0.2])
    snr = float(rng.uniform(0.0, 15.0))
    return DegradationSpec(kind=str(kind), snr_db=snr)


def build_corpus(
    outdir: str | Path,
    counts: CorpusCounts | None = None,
    seed: int = 0,
    clip_duration: float = 2.0,
    rule: ProxyMosRule | None = None,
) -> dict[str, Path]:
    """Generate WAVs and manifests for the predictor and enhancer corpora.

    Returns {"predictor": manifest_path, "enhancer": manifest_path}.
    """
    counts = counts or CorpusCounts()
    rule = rule or ProxyMosRule()
    outdir = Path(outdir)
    wav_dir = outdir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {wav_dir}: {exc}") from exc

    predictor_records = []
    for prefix, split, stream in _PREDICTOR_SPLITS:
        n_items = getattr(counts, f"predictor_{split}")
        for i in range(n_items):
            rng = np.random.default_rng([seed, stream, i])
            clip_seed = int(rng.integers(2**31))
            clip = ClipSpec(seed=clip_seed, duration=clip_duration)
            clean = synth_clean(clip)
            # near speech level: the judge learns prominent pre-speech
            # texture as a feature of high-quality recordings
            clean = add_pause_breath(
                clean, clip.leading_pause, rng, level_db=float(rng.uniform(0.0, 5.0))
            )
            deg = _draw_predictor_degradation(rng)
            noisy = mix_at_snr(clean, deg, seed=int(rng.integers(2**31)), skip_seconds=clip.leading_pause)
            label = proxy_mos(rule, deg)
            clip_id = f"{prefix}{i:04d}"
            rel = f"wav/{clip_id}.wav"
            _write_scaled(wav_dir / f"{clip_id}.wav", [noisy.samples])
            predictor_records.append(
                {
                    "id": clip_id,
                    "wav_path": rel,
                    "mos_raw": round(label.q, 6),
                    "split": split,
                    "set_name": split if split != "test" else f"set-{deg.kind}",
                    "degradation": {"kind": deg.kind, "snr": round(deg.snr_db, 4)},
                }
            )

    enhancer_records = []
    for prefix, split, stream in _ENHANCER_SPLITS:
        n_items = getattr(counts, f"enh_{split}")
        for i in range(n_items):
            rng = np.random.default_rng([seed, stream, i])
            clip_seed = int(rng.integers(2**31))
            clip = ClipSpec(seed=clip_seed, duration=clip_duration)
            clean = synth_clean(clip)
            deg = _draw_enhancer_degradation(rng)
            noisy = mix_at_snr(clean, deg, seed=int(rng.integers(2**31)), skip_seconds=clip.leading_pause)
            clip_id = f"{prefix}{i:04d}"
            rel_noisy = f"wav/{clip_id}.wav"
            rel_clean = f"wav/{clip_id}_clean.wav"
            _write_scaled(wav_dir / f"{clip_id}.wav", [noisy.samples, clean.samples], wav_dir / f"{clip_id}_clean.wav")
            enhancer_records.append(
                {
                    "id": clip_id,
                    "wav_path": rel_noisy,
                    "clean_path": rel_clean,
                    "split": split,
                    "degradation": {"kind": deg.kind, "snr": round(deg.snr_db, 4)},
                }
            )

    paths = {}
    for name, records in (("predictor", predictor_records), ("enhancer", enhancer_records)):
        manifest = outdir / f"{name}_manifest.json"
        manifest.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
        paths[name] = manifest
    meta = {"seed": seed, "counts": vars(counts), "clip_duration": clip_duration, "version": 1}
    (outdir / "corpus_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def _write_scaled(noisy_path: Path, signals: list[np.ndarray], clean_path: Path | None = None) -> None:
    """Write signals, jointly rescaled if needed so PCM never clips.

    A common gain preserves the SNR relationship between pair members.
    """
    peak = max(float(np.abs(s).max()) for s in signals)
    gain = 0.99 / peak if peak > 0.99 else 1.0
    write_wav(noisy_path, signals[0] * gain)
    if clean_path is not None:
        write_wav(clean_path, signals[1] * gain)


def load_manifest(path: str | Path) -> list[dict]:
    """Read a manifest and resolve wav paths relative to its directory."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    for rec in records:
        for key in ("wav_path", "clean_path"):
            if key in rec and rec[key] is not None:
                rec[key] = str((base / rec[key]).resolve())
    return records


def load_waveform(path: str | Path, sample_rate: int = 16000) -> Waveform:
    samples, rate = read_wav(path, expected_rate=sample_rate)
    return Waveform(samples, rate)
