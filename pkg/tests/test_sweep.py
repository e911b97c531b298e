import json

import numpy as np
import pytest

from masklab.enhancer import EnhancerConfig, EnhancerTrainConfig
from masklab.errors import DataError
from masklab.metrics import MetricRow
from masklab.predictor import PredictorConfig, train_predictor
from masklab.sweep import (
    CSV_COLUMNS,
    RunReport,
    SweepConfig,
    alpha_seed,
    build_stimulus_set,
    emit_report,
    run_sweep,
)


@pytest.fixture(scope="module")
def mini_env(tmp_path_factory, tiny_corpus):
    """Tiny corpus + quickly trained frozen predictor + shared dirs."""
    tmp = tmp_path_factory.mktemp("sweep_env")
    records = tiny_corpus["predictor"]
    model, _ = train_predictor(records, PredictorConfig(max_epochs=2, patience=2, batch_size=8), seed=0)
    model.freeze()
    ckpt = model.save(tmp / "pred.ckpt")
    return {"corpus": tiny_corpus["dir"], "predictor": ckpt, "tmp": tmp}


def _mini_sweep_config(env, outdir, alphas=(1.0,), workers=1, seed=0):
    return SweepConfig(
        corpus_dir=str(env["corpus"]),
        predictor_path=str(env["predictor"]),
        outdir=str(outdir),
        alphas=alphas,
        seed=seed,
        workers=workers,
        enhancer=EnhancerConfig(channels=4, blocks=1, window_length=256, hop=128),
        train=EnhancerTrainConfig(epochs=1, batch_size=4, crop_seconds=0.2, warmup_updates=2, val_clips_per_epoch=1),
    )


class TestConfig:
    def test_alpha_bounds_checked(self, mini_env, tmp_path):
        with pytest.raises(DataError):
            _mini_sweep_config(mini_env, tmp_path, alphas=(1.5,))

    def test_duplicates_rejected(self, mini_env, tmp_path):
        with pytest.raises(DataError):
            _mini_sweep_config(mini_env, tmp_path, alphas=(0.5, 0.5))

    def test_missing_inputs_fail_before_training(self, mini_env, tmp_path):
        cfg = SweepConfig(
            corpus_dir=str(tmp_path / "nope"),
            predictor_path=str(mini_env["predictor"]),
            outdir=str(tmp_path / "out"),
            alphas=(1.0,),
        )
        with pytest.raises(DataError):
            run_sweep(cfg)

    def test_alpha_seeds_distinct_and_deterministic(self):
        seeds = [alpha_seed(0, i) for i in range(5)]
        assert len(set(seeds)) == 5
        assert seeds == [alpha_seed(0, i) for i in range(5)]


class TestRunSweep:
    @pytest.fixture(scope="class")
    def single_alpha_report(self, mini_env, tmp_path_factory):
        outdir = tmp_path_factory.mktemp("sweep_single")
        report = run_sweep(_mini_sweep_config(mini_env, outdir))
        return report, outdir

    def test_row_accounting(self, single_alpha_report):
        report, _ = single_alpha_report
        labels = [r.label for r in report.rows]
        assert labels == ["clean", "noisy", "1.00"]

    def test_csv_column_order(self, single_alpha_report):
        _, outdir = single_alpha_report
        header = (outdir / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(CSV_COLUMNS)
        assert CSV_COLUMNS == ("alpha", "si_sdr", "stoi", "lsd", "predictor_score", "halluc_ratio")

    def test_outputs_exist(self, single_alpha_report):
        _, outdir = single_alpha_report
        for name in ("results.csv", "results.json", "summary.md", "spectrogram_grid.png", "metrics_vs_alpha.png"):
            assert (outdir / name).exists(), name
        payload = json.loads((outdir / "results.json").read_text())
        assert payload["per_alpha"]["1.00"]["checkpoint"]
        assert "train_seconds" not in payload["per_alpha"]["1.00"]

    def test_grid_has_two_plus_alphas_panels(self, single_alpha_report):
        report, _ = single_alpha_report
        panels = 2 + len(report.per_alpha)
        assert panels == 3
        for key in ("clean", "noisy"):
            assert key in report.probe

    def test_clean_baseline_values(self, single_alpha_report):
        report, _ = single_alpha_report
        clean = report.rows[0]
        assert clean.si_sdr == 100.0
        assert clean.stoi == pytest.approx(1.0, abs=1e-6)
        assert clean.lsd == pytest.approx(0.0, abs=1e-9)
        assert clean.halluc_ratio == 0.0

    def test_stimulus_set_builder(self, single_alpha_report, mini_env):
        _, outdir = single_alpha_report
        manifest = build_stimulus_set(outdir / "results.json", outdir / "listening", n_clips=2)
        stimuli = json.loads(manifest.read_text())
        # 2 clips x (noisy + 1 alpha)
        assert len(stimuli) == 4
        conditions = {s["condition"] for s in stimuli}
        assert conditions == {"noisy", "alpha=1.00"}
        for s in stimuli:
            assert (manifest.parent / s["wav_path"]).exists()


class TestDeterminism:
    def test_sweep_byte_identical_outputs(self, mini_env, tmp_path):
        cfg1 = _mini_sweep_config(mini_env, tmp_path / "a", alphas=(0.5,), seed=3)
        cfg2 = _mini_sweep_config(mini_env, tmp_path / "b", alphas=(0.5,), seed=3)
        run_sweep(cfg1)
        run_sweep(cfg2)
        csv_a = (tmp_path / "a" / "results.csv").read_text()
        csv_b = (tmp_path / "b" / "results.csv").read_text()
        assert csv_a == csv_b
        json_a = json.loads((tmp_path / "a" / "results.json").read_text())
        json_b = json.loads((tmp_path / "b" / "results.json").read_text())
        json_a["config"]["outdir"] = json_b["config"]["outdir"] = ""
        for payload in (json_a, json_b):
            payload["probe"] = {k: v.split("/")[-1] for k, v in payload["probe"].items()}
            for v in payload["per_alpha"].values():
                for key in ("checkpoint", "history_csv", "probe_png", "probe_wav"):
                    v[key] = v[key].split("/")[-1]
        assert json_a == json_b

    def test_noisy_baseline_independent_of_alpha_list(self, mini_env, tmp_path):
        r1 = run_sweep(_mini_sweep_config(mini_env, tmp_path / "c", alphas=(1.0,), seed=5))
        r2 = run_sweep(_mini_sweep_config(mini_env, tmp_path / "d", alphas=(0.0,), seed=5))
        noisy1 = next(r for r in r1.rows if r.label == "noisy")
        noisy2 = next(r for r in r2.rows if r.label == "noisy")
        assert noisy1.as_dict() == noisy2.as_dict()


class TestEmitReport:
    def test_empty_alpha_report_keeps_baselines(self, tmp_path):
        rows = [
            MetricRow("clean", 100.0, 1.0, 0.0, 0.9, 0.0),
            MetricRow("noisy", 5.0, 0.8, 20.0, 0.5, 0.0),
        ]
        report = RunReport(config={}, rows=rows, per_alpha={}, probe={}, seconds=1.0)
        paths = emit_report(report, tmp_path)
        lines = paths["csv"].read_text().strip().splitlines()
        assert len(lines) == 3  # header + clean + noisy
        assert lines[1].startswith("clean,")
        assert lines[2].startswith("noisy,")

    def test_summary_mentions_out_of_scope_columns(self, tmp_path):
        rows = [MetricRow("clean", 100.0, 1.0, 0.0, 0.9, 0.0)]
        report = RunReport(config={}, rows=rows, per_alpha={}, probe={}, seconds=0.0)
        emit_report(report, tmp_path)
        text = (tmp_path / "summary.md").read_text()
        for name in ("PESQ", "CSIG", "DNSMOS"):
            assert name in text
