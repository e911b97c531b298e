"""Alpha-sweep experiment driver: trains one enhancer per loss mix,
evaluates each against the frozen predictor and intrusive metrics, renders
probe spectrograms, and emits CSV/JSON/markdown/figure reports.

Per-alpha trainings are independent; they run in parallel worker
processes (each pinned to one BLAS thread) and the report is assembled in
a fixed order, so outputs are byte-identical regardless of scheduling.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import dsp
from .enhancer import (
    EnhancerConfig,
    EnhancerTrainConfig,
    MaskEnhancer,
    enhance,
    train_enhancer,
    write_history_csv,
)
from .errors import DataError
from .metrics import MetricRow, evaluate_model
from .predictor import QualityPredictor
from .synthdata import load_manifest, load_waveform

OUT_OF_SCOPE_COLUMNS = ("PESQ", "CSIG", "CBAK", "COVL", "DNSMOS SIG/BAK/OVR")
CSV_COLUMNS = ("alpha", "si_sdr", "stoi", "lsd", "predictor_score", "halluc_ratio")


def default_sweep_enhancer() -> EnhancerConfig:
    # 16 ms windows keep the T x F plane small enough for the CPU budget
    return EnhancerConfig(window_length=256, hop=128)


def default_sweep_train() -> EnhancerTrainConfig:
    return EnhancerTrainConfig(
        epochs=30, batch_size=4, crop_seconds=0.15, peak_lr=1e-3, val_clips_per_epoch=4
    )


@dataclass(frozen=True)
class SweepConfig:
    corpus_dir: str
    predictor_path: str
    outdir: str
    alphas: tuple[float, ...] = (1.0, 0.5, 0.0)
    seed: int = 0
    workers: int = 3
    locus_boundary_seconds: float = 0.5
    enhancer: EnhancerConfig = field(default_factory=default_sweep_enhancer)
    train: EnhancerTrainConfig = field(default_factory=default_sweep_train)

    def __post_init__(self) -> None:
        if not self.alphas:
            raise DataError("alphas must be non-empty")
        if any(not (0.0 <= a <= 1.0) for a in self.alphas):
            raise DataError(f"alphas must lie in [0, 1], got {self.alphas}")
        if len(set(self.alphas)) != len(self.alphas):
            raise DataError(f"duplicate alphas: {self.alphas}")


@dataclass
class RunReport:
    config: dict
    rows: list[MetricRow]
    per_alpha: dict[str, dict]
    probe: dict[str, str]
    seconds: float
    out_of_scope: tuple[str, ...] = OUT_OF_SCOPE_COLUMNS


def alpha_seed(master_seed: int, index: int) -> int:
    """Fresh deterministic init per sweep position, derived from one seed."""
    return int(np.random.default_rng([master_seed, 7000 + index]).integers(2**31))


def _alpha_key(alpha: float) -> str:
    return format(alpha, ".2f")


def _train_eval_worker(payload: dict) -> dict:
    """Runs in a separate process: train one alpha, evaluate, render probe."""
    from . import _alloc

    _alloc.tune_allocator()
    alpha = payload["alpha"]
    outdir = Path(payload["outdir"])
    enh_cfg = EnhancerConfig(**payload["enhancer"])
    train_cfg = EnhancerTrainConfig(**payload["train"])
    predictor = QualityPredictor.load(payload["predictor_path"])
    if not predictor.frozen:
        predictor.freeze()
    records = payload["train_records"]
    val_records = payload["val_records"]
    test_records = payload["test_records"]

    model, history = train_enhancer(
        alpha,
        records,
        predictor,
        config=enh_cfg,
        train_config=train_cfg,
        seed=payload["alpha_seed"],
        val_records=val_records,
    )
    key = _alpha_key(alpha)
    ckpt = model.save(outdir / f"enhancer_alpha{key}.ckpt", {"alpha": alpha})
    hist_csv = write_history_csv(history, outdir / f"history_alpha{key}.csv")

    results = evaluate_model(
        model, predictor, test_records, locus_boundary_seconds=payload["locus_boundary"]
    )

    probe = load_waveform(payload["probe_path"])
    probe_out, _ = enhance(model, probe)
    from .audio_io import write_wav

    probe_wav = outdir / "probe" / f"enhanced_alpha{key}.wav"
    probe_wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(probe_wav, np.clip(probe_out.samples, -1, 1))
    probe_png = outdir / "probe" / f"enhanced_alpha{key}.png"
    dsp.render_spectrogram(dsp.stft(probe_out, enh_cfg.stft), probe_png, scale=2)

    return {
        "alpha": alpha,
        "row": results["model"].row.as_dict(),
        "clean_row": results["clean"].row.as_dict(),
        "noisy_row": results["noisy"].row.as_dict(),
        "per_file": results["model"].per_file,
        "extras": results["model"].extras,
        "checkpoint": str(ckpt),
        "history_csv": str(hist_csv),
        "probe_png": str(probe_png),
        "probe_wav": str(probe_wav),
        "train_seconds": history.seconds,
    }


def run_sweep(cfg: SweepConfig) -> RunReport:
    t0 = time.time()
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    predictor_path = Path(cfg.predictor_path)
    manifest_path = Path(cfg.corpus_dir) / "enhancer_manifest.json"
    if not predictor_path.exists():
        raise DataError(f"predictor checkpoint not found: {predictor_path}")
    if not manifest_path.exists():
        raise DataError(f"enhancer manifest not found: {manifest_path}")
    records = load_manifest(manifest_path)
    train_records = [r for r in records if r["split"] == "train"]
    val_records = [r for r in records if r["split"] == "val"]
    test_records = [r for r in records if r["split"] == "test"]
    if not train_records or not test_records:
        raise DataError(
            f"need train and test splits, got {len(train_records)}/{len(test_records)}"
        )

    probe_rec = test_records[0]
    probe_noisy = load_waveform(probe_rec["wav_path"])
    probe_clean = load_waveform(probe_rec["clean_path"])
    probe_dir = outdir / "probe"
    probe_dir.mkdir(parents=True, exist_ok=True)
    stft_cfg = cfg.enhancer.stft
    probe_paths = {
        "clean": str(dsp.render_spectrogram(dsp.stft(probe_clean, stft_cfg), probe_dir / "clean.png", scale=2)),
        "noisy": str(dsp.render_spectrogram(dsp.stft(probe_noisy, stft_cfg), probe_dir / "noisy.png", scale=2)),
        "clip_id": probe_rec["id"],
    }

    payloads = []
    for i, alpha in enumerate(cfg.alphas):
        payloads.append(
            {
                "alpha": alpha,
                "alpha_seed": alpha_seed(cfg.seed, i),
                "outdir": str(outdir),
                "enhancer": asdict(cfg.enhancer),
                "train": asdict(cfg.train),
                "predictor_path": str(predictor_path),
                "train_records": train_records,
                "val_records": val_records,
                "test_records": test_records,
                "probe_path": probe_rec["wav_path"],
                "locus_boundary": cfg.locus_boundary_seconds,
            }
        )

    workers = max(1, min(cfg.workers, len(cfg.alphas)))
    if workers == 1:
        results = [_train_eval_worker(p) for p in payloads]
    else:
        # children must see single-threaded BLAS before importing numpy
        saved = {k: os.environ.get(k) for k in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS")}
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        os.environ["OMP_NUM_THREADS"] = "1"
        try:
            with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
                results = list(pool.map(_train_eval_worker, payloads))
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v

    rows: list[MetricRow] = []
    first = results[0]
    rows.append(MetricRow(**{**first["clean_row"], "label": "clean"}))
    rows.append(MetricRow(**{**first["noisy_row"], "label": "noisy"}))
    per_alpha: dict[str, dict] = {}
    for res in results:
        key = _alpha_key(res["alpha"])
        row = MetricRow(**{**res["row"], "label": key, "alpha": res["alpha"]})
        rows.append(row)
        per_alpha[key] = {k: v for k, v in res.items() if k not in ("row", "clean_row", "noisy_row")}

    report = RunReport(
        config=_config_as_dict(cfg),
        rows=rows,
        per_alpha=per_alpha,
        probe=probe_paths,
        seconds=time.time() - t0,
    )
    emit_report(report, outdir)
    return report


def _config_as_dict(cfg: SweepConfig) -> dict:
    d = asdict(cfg)
    d["alphas"] = list(cfg.alphas)
    return d


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit_report(report: RunReport, outdir: str | Path) -> dict[str, Path]:
    """Write results.csv, results.json, summary.md, and figures."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    csv_path = outdir / "results.csv"
    try:
        with open(csv_path, "w", newline="") as f:
            f.write(",".join(CSV_COLUMNS) + "\n")
            for row in report.rows:
                f.write(
                    ",".join(
                        [
                            row.label,
                            _fmt(row.si_sdr),
                            _fmt(row.stoi),
                            _fmt(row.lsd),
                            _fmt(row.predictor_score),
                            _fmt(row.halluc_ratio),
                        ]
                    )
                    + "\n"
                )
    except OSError as exc:
        raise DataError(f"cannot write {csv_path}: {exc}") from exc

    json_path = outdir / "results.json"
    # wall time is reported only in summary.md: CSV/JSON outputs must be
    # byte-identical across reruns with the same config and seed
    per_alpha = {
        k: {kk: vv for kk, vv in v.items() if kk != "train_seconds"}
        for k, v in report.per_alpha.items()
    }
    payload = {
        "config": report.config,
        "rows": [r.as_dict() for r in report.rows],
        "per_alpha": per_alpha,
        "probe": report.probe,
        "out_of_scope_columns": list(report.out_of_scope),
    }
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    md_path = outdir / "summary.md"
    lines = [
        "# Sweep results",
        "",
        "| " + " | ".join(CSV_COLUMNS) + " |",
        "|" + "---|" * len(CSV_COLUMNS),
    ]
    for row in report.rows:
        lines.append(
            "| "
            + " | ".join(
                [
                    row.label,
                    _fmt(row.si_sdr),
                    _fmt(row.stoi),
                    _fmt(row.lsd),
                    _fmt(row.predictor_score),
                    _fmt(row.halluc_ratio),
                ]
            )
            + " |"
        )
    lines += [
        "",
        "Columns not reproduced here (external/proprietary scoring models): "
        + ", ".join(report.out_of_scope)
        + ".",
        "`lsd` (log-spectral distance, dB, lower is better) stands in as the",
        "reproducible intrusive spectral column.",
        "",
        f"Probe clip: `{report.probe.get('clip_id', '?')}`; spectrograms under `probe/`.",
        "",
        f"Total wall time: {report.seconds:.1f} s.",
    ]
    md_path.write_text("\n".join(lines) + "\n")

    fig_paths = _emit_figures(report, outdir)
    return {"csv": csv_path, "json": json_path, "summary": md_path, **fig_paths}


def _emit_figures(report: RunReport, outdir: Path) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    # spectrogram grid: clean, noisy, then one panel per alpha
    panels = [("clean", report.probe.get("clean")), ("noisy", report.probe.get("noisy"))]
    for key in sorted(report.per_alpha, key=float, reverse=True):
        panels.append((f"alpha={key}", report.per_alpha[key]["probe_png"]))
    cols = 2
    rows_n = (len(panels) + cols - 1) // cols
    fig, axes = plt.subplots(rows_n, cols, figsize=(8, 2.6 * rows_n))
    axes = np.atleast_1d(axes).ravel()
    for ax, (title, png) in zip(axes, panels):
        if png and Path(png).exists():
            ax.imshow(plt.imread(png), origin="upper", aspect="auto")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in axes[len(panels) :]:
        ax.axis("off")
    fig.suptitle("Probe clip spectrograms (time -> right, frequency -> up)", fontsize=10)
    fig.tight_layout()
    grid_path = outdir / "spectrogram_grid.png"
    fig.savefig(grid_path, dpi=120)
    plt.close(fig)

    # metric trends vs alpha
    alpha_rows = [r for r in report.rows if r.alpha is not None]
    alpha_rows.sort(key=lambda r: r.alpha, reverse=True)
    noisy_row = next((r for r in report.rows if r.label == "noisy"), None)
    if not alpha_rows or noisy_row is None:
        return {"grid": grid_path}
    xs = [r.alpha for r in alpha_rows]
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    ax1.plot(xs, [r.predictor_score for r in alpha_rows], "o-", color="tab:red", label="predictor score")
    ax1.set_xlabel("alpha (spectral-loss weight)")
    ax1.set_ylabel("predictor score", color="tab:red")
    ax1.invert_xaxis()
    ax2 = ax1.twinx()
    ax2.plot(xs, [r.si_sdr for r in alpha_rows], "s-", color="tab:blue", label="SI-SDR")
    ax2.axhline(noisy_row.si_sdr, color="tab:blue", linestyle=":", linewidth=1, label="noisy SI-SDR")
    ax2.set_ylabel("SI-SDR (dB)", color="tab:blue")
    fig.suptitle("Quality-judge score rises as the reference anchor fades", fontsize=10)
    fig.tight_layout()
    trend_path = outdir / "metrics_vs_alpha.png"
    fig.savefig(trend_path, dpi=120)
    plt.close(fig)
    return {"grid": grid_path, "trend": trend_path}


def build_stimulus_set(
    report_json: str | Path, outdir: str | Path, n_clips: int = 3
) -> Path:
    """Prepare a listening-test stimulus set from a sweep's outputs.

    Takes the first `n_clips` test clips; conditions are the noisy input
    plus each trained alpha model's output, mirroring a
    few-files-per-condition listening test.
    """
    report_json = Path(report_json)
    payload = json.loads(report_json.read_text())
    corpus_dir = Path(payload["config"]["corpus_dir"])
    records = load_manifest(corpus_dir / "enhancer_manifest.json")
    test_records = [r for r in records if r["split"] == "test"][:n_clips]
    if not test_records:
        raise DataError("no test records available for stimuli")
    outdir = Path(outdir)
    wav_dir = outdir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    from .audio_io import write_wav

    stimuli = []
    for rec in test_records:
        noisy = load_waveform(rec["wav_path"])
        sid = f"{rec['id']}_noisy"
        path = wav_dir / f"{sid}.wav"
        write_wav(path, np.clip(noisy.samples, -1, 1))
        stimuli.append({"id": sid, "condition": "noisy", "wav_path": f"wav/{sid}.wav"})
    for key in sorted(payload["per_alpha"], key=float, reverse=True):
        model = MaskEnhancer.load(payload["per_alpha"][key]["checkpoint"])
        for rec in test_records:
            noisy = load_waveform(rec["wav_path"])
            out, _ = enhance(model, noisy)
            sid = f"{rec['id']}_alpha{key}"
            path = wav_dir / f"{sid}.wav"
            write_wav(path, np.clip(out.samples, -1, 1))
            stimuli.append({"id": sid, "condition": f"alpha={key}", "wav_path": f"wav/{sid}.wav"})
    manifest = outdir / "stimuli.json"
    manifest.write_text(json.dumps(stimuli, indent=2, sort_keys=True) + "\n")
    return manifest
