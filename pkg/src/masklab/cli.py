"""Command-line interface.

Subcommands: gen-data, train-predictor, train-se, sweep, eval,
spectrogram, report, serve. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import DataError, MaskLabError, NumericalError, ShapeError, UsageError


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return section


def _build(cls, section: dict, **overrides):
    params = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**params)
    except TypeError as exc:
        raise UsageError(f"bad config for {cls.__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import CorpusCounts, build_corpus

    cfg = _load_config(args.config)
    section = _section(cfg, "corpus")
    duration = section.pop("clip_duration", 2.0)
    counts = _build(CorpusCounts, section)
    paths = build_corpus(args.out, counts=counts, seed=args.seed, clip_duration=duration)
    print(f"wrote {paths['predictor']} and {paths['enhancer']}")
    return 0


def cmd_train_predictor(args) -> int:
    from .predictor import (
        PredictorConfig,
        evaluate_predictor,
        train_predictor,
        write_predictor_report,
    )
    from .synthdata import load_manifest

    cfg = _load_config(args.config)
    pconfig = _build(PredictorConfig, _section(cfg, "predictor"))
    records = load_manifest(Path(args.corpus) / "predictor_manifest.json")
    model, history = train_predictor(records, pconfig, seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt = outdir / "predictor.ckpt"
    model.freeze()
    model.save(ckpt, {"best_epoch": history.best_epoch})
    with open(outdir / "predictor_history.csv", "w") as f:
        f.write("epoch,train_loss,val_loss,lr\n")
        for rec in history.epochs:
            f.write(f"{rec.epoch},{rec.train_loss:.8f},{rec.val_loss:.8f},{rec.lr:.8f}\n")
    test_records = [r for r in records if r["split"] == "test"]
    if test_records:
        report = evaluate_predictor(model, test_records)
        write_predictor_report(report, outdir / "predictor_eval.csv")
        mean = report.get("mean", report["overall"])
        print(f"predictor: best epoch {history.best_epoch}, "
              f"test spearman {mean['spearman_r']:.3f}, rmse {mean['rmse']:.3f}")
    print(f"saved {ckpt}")
    return 0


def cmd_train_se(args) -> int:
    from .enhancer import EnhancerConfig, EnhancerTrainConfig, train_enhancer, write_history_csv
    from .predictor import QualityPredictor
    from .synthdata import load_manifest

    cfg = _load_config(args.config)
    enh_cfg = _build(EnhancerConfig, _section(cfg, "enhancer"))
    train_cfg = _build(EnhancerTrainConfig, _section(cfg, "train"), epochs=args.epochs)
    records = load_manifest(Path(args.corpus) / "enhancer_manifest.json")
    train_records = [r for r in records if r["split"] == "train"]
    val_records = [r for r in records if r["split"] == "val"]
    predictor = None
    if args.alpha < 1.0 or args.predictor:
        if not args.predictor:
            raise UsageError("--predictor is required when alpha < 1")
        predictor = QualityPredictor.load(args.predictor)
        if not predictor.frozen:
            predictor.freeze()
    model, history = train_enhancer(
        args.alpha, train_records, predictor,
        config=enh_cfg, train_config=train_cfg, seed=args.seed, val_records=val_records,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    key = format(args.alpha, ".2f")
    ckpt = model.save(outdir / f"enhancer_alpha{key}.ckpt", {"alpha": args.alpha})
    write_history_csv(history, outdir / f"history_alpha{key}.csv")
    print(f"saved {ckpt} ({history.seconds:.1f} s)")
    return 0


def cmd_sweep(args) -> int:
    from .enhancer import EnhancerConfig, EnhancerTrainConfig
    from .sweep import SweepConfig, build_stimulus_set, default_sweep_enhancer, default_sweep_train, run_sweep

    cfg = _load_config(args.config)
    if args.full_grid:
        alphas = tuple(round(a, 1) for a in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0])
    elif args.alphas:
        try:
            alphas = tuple(float(a) for a in args.alphas.split(","))
        except ValueError as exc:
            raise UsageError(f"bad --alphas: {exc}") from exc
    else:
        alphas = tuple(_section(cfg, "sweep").get("alphas", (1.0, 0.5, 0.0)))

    enh_section = {**asdict(default_sweep_enhancer()), **_section(cfg, "enhancer")}
    train_section = {**asdict(default_sweep_train()), **_section(cfg, "train")}
    sweep_section = {k: v for k, v in _section(cfg, "sweep").items() if k != "alphas"}
    sweep_cfg = SweepConfig(
        corpus_dir=args.corpus,
        predictor_path=args.predictor,
        outdir=args.out,
        alphas=alphas,
        seed=args.seed,
        workers=args.workers if args.workers is not None else sweep_section.get("workers", 3),
        enhancer=_build(EnhancerConfig, enh_section),
        train=_build(EnhancerTrainConfig, train_section, epochs=args.epochs),
    )
    report = run_sweep(sweep_cfg)
    if args.stimuli:
        manifest = build_stimulus_set(Path(args.out) / "results.json", Path(args.out) / "listening")
        print(f"stimulus set: {manifest}")
    print(f"sweep complete in {report.seconds:.1f} s; results under {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .enhancer import MaskEnhancer
    from .metrics import evaluate_model
    from .predictor import QualityPredictor
    from .sweep import CSV_COLUMNS
    from .synthdata import load_manifest

    model = MaskEnhancer.load(args.model)
    predictor = QualityPredictor.load(args.predictor) if args.predictor else None
    if predictor is not None and not predictor.frozen:
        predictor.freeze()
    records = [r for r in load_manifest(Path(args.corpus) / "enhancer_manifest.json")
               if r["split"] == args.split]
    results = evaluate_model(model, predictor, records, locus_boundary_seconds=0.5)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [("clean", results["clean"]), ("noisy", results["noisy"]), ("model", results["model"])]
    with open(outdir / "eval.csv", "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for label, res in rows:
            r = res.row
            f.write(f"{label},{r.si_sdr:.6f},{r.stoi:.6f},{r.lsd:.6f},"
                    f"{r.predictor_score:.6f},{r.halluc_ratio:.6f}\n")
    detail = {label: {"row": res.row.as_dict(), "per_file": res.per_file, "extras": res.extras}
              for label, res in rows}
    (outdir / "eval.json").write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
    print(f"wrote {outdir / 'eval.csv'}")
    return 0


def cmd_spectrogram(args) -> int:
    from . import dsp
    from .synthdata import load_waveform

    cfg = dsp.StftConfig(args.window, args.hop)
    wave = load_waveform(args.wav)
    path = dsp.render_spectrogram(dsp.stft(wave, cfg), args.out, scale=args.scale)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricRow
    from .sweep import RunReport, emit_report

    payload = json.loads(Path(args.results).read_text())
    report = RunReport(
        config=payload["config"],
        rows=[MetricRow(**r) for r in payload["rows"]],
        per_alpha=payload["per_alpha"],
        probe=payload["probe"],
        seconds=0.0,
        out_of_scope=tuple(payload.get("out_of_scope_columns", [])),
    )
    paths = emit_report(report, args.out)
    print(f"wrote {paths['csv']}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    ui_dir = args.ui
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = bundled if bundled.exists() else None
    serve(args.data, host=args.host, port=args.port, ui_dir=ui_dir, seed=args.seed)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masklab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with per-module sections")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-predictor", help="train the quality predictor")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("train-se", help="train one enhancer at a fixed alpha")
    common(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--predictor")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_se)

    p = sub.add_parser("sweep", help="train and evaluate one enhancer per alpha")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", help="comma-separated list, e.g. 1.0,0.5,0.0")
    p.add_argument("--full-grid", action="store_true", help="use the 11-point alpha grid")
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--stimuli", action=argparse.BooleanOptionalAction, default=True,
                   help="also emit a listening-test stimulus set")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a trained enhancer")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--predictor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrogram", help="render a WAV's spectrogram to PNG")
    common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("--scale", type=int, default=2)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("report", help="re-emit reports from a results.json")
    common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the listening-test service")
    common(p)
    p.add_argument("--data", required=True, help="directory with stimuli.json")
    p.add_argument("--ui", help="static UI bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except MaskLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
