"""Intrusive metrics, predictor scoring, and hallucination localization.

All functions are pure. SI-SDR and STOI are implemented from their
definitions; STOI internally resamples to 10 kHz, removes silent frames,
and averages short-time one-third-octave envelope correlations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from .errors import DataError, ShapeError

SI_SDR_CAP_DB = 100.0

STOI_FS = 10000
STOI_WINDOW = 512
STOI_HOP = 256
STOI_BANDS = 15
STOI_LOWEST_CF = 150.0
STOI_SEGMENT = 30  # frames per correlation segment
STOI_CLIP_DB = -15.0
STOI_SILENCE_RANGE_DB = 40.0


def si_sdr(est: dsp.Waveform, ref: dsp.Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +/-100."""
    e, r = est.samples, ref.samples
    if e.shape != r.shape:
        raise ShapeError(f"length mismatch: {e.shape} vs {r.shape}")
    r_energy = float(np.dot(r, r))
    if r_energy <= 0.0:
        raise DataError("si_sdr: reference signal is all zero")
    beta = float(np.dot(e, r)) / r_energy
    proj = beta * r
    proj_energy = float(np.dot(proj, proj))
    err = e - proj
    err_energy = float(np.dot(err, err))
    if proj_energy <= 0.0:
        return -SI_SDR_CAP_DB
    if err_energy <= 0.0:
        return SI_SDR_CAP_DB
    val = 10.0 * np.log10(proj_energy / err_energy)
    return float(np.clip(val, -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def _third_octave_filterbank(n_bins: int, fs: int, n_fft: int) -> np.ndarray:
    """Boolean band matrix (STOI_BANDS, n_bins) of one-third-octave bands."""
    freqs = np.arange(n_bins) * fs / n_fft
    bands = np.zeros((STOI_BANDS, n_bins), dtype=bool)
    for j in range(STOI_BANDS):
        cf = STOI_LOWEST_CF * 2.0 ** (j / 3.0)
        lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        bands[j] = (freqs >= lo) & (freqs < hi)
    return bands


def stoi(est: dsp.Waveform, ref: dsp.Waveform) -> float:
    """Short-time objective intelligibility of `est` against clean `ref`.

    Steps: resample both to 10 kHz; drop frames whose clean energy is more
    than 40 dB below the loudest frame; 512/256 Hann STFT; 15 one-third-
    octave band envelopes from 150 Hz; per-band correlation over 30-frame
    segments after normalizing and clipping the processed envelope at
    -15 dB SDR; final score is the mean correlation.
    """
    if len(est) != len(ref):
        raise ShapeError(f"length mismatch: {len(est)} vs {len(ref)}")
    if est.sample_rate != ref.sample_rate:
        raise DataError("sample rates differ")
    up, down = STOI_FS, est.sample_rate
    g = np.gcd(up, down)
    x = resample_poly(ref.samples, up // g, down // g)  # clean
    y = resample_poly(est.samples, up // g, down // g)  # processed

    if len(x) < STOI_WINDOW:
        raise DataError("stoi: input too short after resampling")
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(STOI_WINDOW) / STOI_WINDOW))
    xf = dsp.frame_signal(x, STOI_WINDOW, STOI_HOP) * window
    yf = dsp.frame_signal(y, STOI_WINDOW, STOI_HOP) * window

    frame_energy_db = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-300)
    keep = frame_energy_db > frame_energy_db.max() - STOI_SILENCE_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    if xf.shape[0] < STOI_SEGMENT:
        raise DataError(
            f"stoi: only {xf.shape[0]} active frames, need at least {STOI_SEGMENT}"
        )

    spec_x = np.abs(np.fft.rfft(xf, axis=1)) ** 2
    spec_y = np.abs(np.fft.rfft(yf, axis=1)) ** 2
    bands = _third_octave_filterbank(spec_x.shape[1], STOI_FS, STOI_WINDOW)
    env_x = np.sqrt(spec_x @ bands.T)  # (frames, bands)
    env_y = np.sqrt(spec_y @ bands.T)

    clip_gain = 10.0 ** (-STOI_CLIP_DB / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, env_x.shape[0] + 1):
        seg_x = env_x[m - STOI_SEGMENT : m]  # (30, bands)
        seg_y = env_y[m - STOI_SEGMENT : m]
        norms_x = np.linalg.norm(seg_x, axis=0)
        norms_y = np.linalg.norm(seg_y, axis=0)
        alpha = norms_x / np.maximum(norms_y, 1e-300)
        seg_y_n = np.minimum(seg_y * alpha, seg_x * (1.0 + clip_gain))
        cx = seg_x - seg_x.mean(axis=0)
        cy = seg_y_n - seg_y_n.mean(axis=0)
        denom = np.linalg.norm(cx, axis=0) * np.linalg.norm(cy, axis=0)
        d = np.where(denom > 0, (cx * cy).sum(axis=0) / np.maximum(denom, 1e-300), 0.0)
        scores.append(d)
    return float(np.mean(scores))


def log_spectral_distance(
    est: dsp.Waveform, ref: dsp.Waveform, cfg: dsp.StftConfig | None = None, floor_db: float = -80.0
) -> float:
    """RMS log-magnitude spectral distance in dB.

    Each spectrogram's log magnitudes are floored `floor_db` below its own
    peak, so a pure gain shift contributes uniformly in every bin.
    """
    if len(est) != len(ref):
        raise ShapeError(f"length mismatch: {len(est)} vs {len(ref)}")
    cfg = cfg or dsp.StftConfig()
    mag_e = dsp.stft(est, cfg).magnitude()
    mag_r = dsp.stft(ref, cfg).magnitude()

    def logmag(m: np.ndarray) -> np.ndarray:
        peak = max(float(m.max()), 1e-300)
        return 20.0 * np.log10(np.maximum(m, peak * 10.0 ** (floor_db / 20.0)))

    diff = logmag(mag_e) - logmag(mag_r)
    per_frame_ms = np.mean(diff**2, axis=1)
    return float(np.sqrt(np.mean(per_frame_ms)))


@dataclass
class HallucinationMap:
    """Bins where the enhanced output carries energy absent from both the
    noisy input and the clean reference."""

    flagged: np.ndarray  # (T, F) bool
    margin_db: float
    energy_ratio: float  # flagged energy / total energy of the estimate

    def __post_init__(self) -> None:
        if not (0.0 <= self.energy_ratio <= 1.0):
            raise DataError(f"energy_ratio out of range: {self.energy_ratio}")


def hallucination_map(
    noisy_spec: dsp.ComplexSpectrogram,
    ref_spec: dsp.ComplexSpectrogram,
    est_spec: dsp.ComplexSpectrogram,
    margin_db: float = 6.0,
    floor_db: float = -40.0,
) -> HallucinationMap:
    """Flag bins whose estimated power exceeds both input and reference by
    more than `margin_db` (strict), above an absolute floor relative to the
    estimate's peak bin.

    The floor exists because masking models can multiply near-zero input
    bins by arbitrarily large drifting masks; the resulting residue sits
     50+ dB under the output's real content and is inaudible, but without
    a floor it dominates flag counts on spectrally sparse mixtures."""
    if noisy_spec.shape != ref_spec.shape or noisy_spec.shape != est_spec.shape:
        raise ShapeError(
            f"shape mismatch: {noisy_spec.shape}/{ref_spec.shape}/{est_spec.shape}"
        )
    p_noisy = noisy_spec.power()
    p_ref = ref_spec.power()
    p_est = est_spec.power()
    margin = 10.0 ** (margin_db / 10.0)
    floor = p_est.max() * 10.0 ** (floor_db / 10.0)
    flagged = (p_est > np.maximum(p_noisy, p_ref) * margin) & (p_est > floor)
    total = float(p_est.sum())
    ratio = float(p_est[flagged].sum() / total) if total > 0 else 0.0
    return HallucinationMap(flagged=flagged, margin_db=margin_db, energy_ratio=ratio)


def flag_density_split(
    hmap: HallucinationMap, cfg: dsp.StftConfig, sample_rate: int, boundary_seconds: float
) -> tuple[float, float]:
    """Flagged-bin density inside vs outside the leading time region.

    Frames belong to the head region when their center sample falls before
    the boundary.
    """
    n_frames = hmap.flagged.shape[0]
    centers = np.arange(n_frames) * cfg.hop + cfg.window_length / 2.0
    head = centers < boundary_seconds * sample_rate
    if not head.any() or head.all():
        raise DataError("boundary leaves an empty region")
    head_density = float(hmap.flagged[head].mean())
    tail_density = float(hmap.flagged[~head].mean())
    return head_density, tail_density


@dataclass
class MetricRow:
    """One evaluation row: a condition label plus corpus-mean metrics."""

    label: str
    si_sdr: float
    stoi: float
    lsd: float
    predictor_score: float
    halluc_ratio: float
    alpha: float | None = None

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "alpha": self.alpha,
            "si_sdr": self.si_sdr,
            "stoi": self.stoi,
            "lsd": self.lsd,
            "predictor_score": self.predictor_score,
            "halluc_ratio": self.halluc_ratio,
        }


@dataclass
class EvaluationResult:
    row: MetricRow
    per_file: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _clip_metrics(
    est: dsp.Waveform,
    clean: dsp.Waveform,
    noisy: dsp.Waveform,
    predictor,
    cfg: dsp.StftConfig,
    locus_boundary_seconds: float | None = None,
) -> dict:
    est_spec = dsp.stft(est, cfg)
    clean_spec = dsp.stft(clean, cfg)
    noisy_spec = dsp.stft(noisy, cfg)
    # istft output may be slightly shorter than the original clip
    n = min(len(est), len(clean))
    est_cut = dsp.Waveform(est.samples[:n], est.sample_rate)
    clean_cut = dsp.Waveform(clean.samples[:n], clean.sample_rate)
    hmap = hallucination_map(noisy_spec, clean_spec, est_spec)
    out = {
        "si_sdr": si_sdr(est_cut, clean_cut),
        "stoi": stoi(est_cut, clean_cut),
        "lsd": log_spectral_distance(est_cut, clean_cut, cfg),
        "predictor_score": predictor.predict(est) if predictor is not None else float("nan"),
        "halluc_ratio": hmap.energy_ratio,
    }
    if locus_boundary_seconds is not None:
        head, tail = flag_density_split(hmap, cfg, est.sample_rate, locus_boundary_seconds)
        out["halluc_head_density"] = head
        out["halluc_tail_density"] = tail
    return out


def evaluate_model(
    model, predictor, records: list[dict], locus_boundary_seconds: float | None = None
) -> dict[str, EvaluationResult]:
    """Evaluate an enhancer plus the clean/noisy baselines on (noisy, clean)
    pairs. Returns {"model": ..., "clean": ..., "noisy": ...}; when a locus
    boundary is given, the model result's extras carry the mean flagged-bin
    densities inside/outside the leading region."""
    from .enhancer import enhance
    from .synthdata import load_waveform

    if not records:
        raise DataError("empty evaluation manifest")
    cfg = model.config.stft
    rows: dict[str, list[dict]] = {"model": [], "clean": [], "noisy": []}
    for rec in records:
        noisy = load_waveform(rec["wav_path"])
        clean = load_waveform(rec["clean_path"])
        out, _ = enhance(model, noisy)
        n = cfg.output_length(cfg.num_frames(len(noisy)))
        clean_aligned = dsp.Waveform(clean.samples[: max(n, len(out))], clean.sample_rate)
        noisy_aligned = dsp.Waveform(noisy.samples[: max(n, len(out))], noisy.sample_rate)
        for name, est in (("model", out), ("clean", clean_aligned), ("noisy", noisy_aligned)):
            bound = locus_boundary_seconds if name == "model" else None
            m = _clip_metrics(est, clean_aligned, noisy_aligned, predictor, cfg, bound)
            m["id"] = rec.get("id")
            rows[name].append(m)
    out_results = {}
    for name, items in rows.items():
        means = {
            k: float(np.mean([it[k] for it in items]))
            for k in ("si_sdr", "stoi", "lsd", "predictor_score", "halluc_ratio")
        }
        extras = {}
        if name == "model" and locus_boundary_seconds is not None:
            extras = {
                "halluc_head_density": float(np.mean([it["halluc_head_density"] for it in items])),
                "halluc_tail_density": float(np.mean([it["halluc_tail_density"] for it in items])),
            }
        out_results[name] = EvaluationResult(
            row=MetricRow(label=name, **means), per_file=items, extras=extras
        )
    return out_results
