import csv
import json
from pathlib import Path

import pytest
import yaml

from vidssl.cli import main
from vidssl.config import ExperimentConfig, dump_config, save_config


@pytest.fixture
def cli_cfg(tmp_path):
    """A fast experiment config written to disk."""
    cfg = ExperimentConfig()
    cfg.data.train_clips = 32
    cfg.data.test_clips = 8
    cfg.train.batch_size = 8
    cfg.train.queue_capacity = 32
    cfg.train.warmup_epochs = 1
    cfg.train.adversarial_epochs = 1
    cfg.eval.probe_epochs = 4
    cfg.ablation.cells = [{"mask_mode": "none", "decay": 1.0}]
    cfg.ablation.seeds = [0]
    cfg.out_dir = str(tmp_path / "run")
    path = tmp_path / "config.yaml"
    save_config(cfg, path)
    return cfg, path


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


class TestSynth:
    def test_writes_manifest_and_refuses_overwrite(self, cli_cfg, capsys):
        cfg, path = cli_cfg
        assert run_cli("synth", "--config", path) == 0
        manifest = Path(cfg.out_dir) / "dataset" / "manifest.jsonl"
        assert manifest.exists()
        first = manifest.read_bytes()

        assert run_cli("synth", "--config", path) == 2  # no --force
        assert manifest.read_bytes() == first

        assert run_cli("synth", "--config", path, "--force") == 0
        assert manifest.read_bytes() == first  # idempotent bytes

    def test_class_histogram_balanced(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        manifest = Path(cfg.out_dir) / "dataset" / "manifest.jsonl"
        rows = [json.loads(line) for line in manifest.read_text().splitlines()]
        train = [r["label"] for r in rows if r["split"] == "train"]
        counts = [train.count(c) for c in range(4)]
        assert max(counts) - min(counts) <= 1

    def test_optional_frame_export(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path, "--export-frames", "2")
        pngs = list((Path(cfg.out_dir) / "dataset" / "frames").glob("*.png"))
        assert len(pngs) == 2 * cfg.data.video_frames

    def test_out_root_env_prefixes_relative_dirs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VIDSSL_OUT_ROOT", str(tmp_path / "root"))
        cfg = ExperimentConfig()
        cfg.data.train_clips = 8
        cfg.data.test_clips = 4
        cfg.out_dir = "nested/run"
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        assert run_cli("synth", "--config", path) == 0
        assert (tmp_path / "root" / "nested" / "run" / "dataset"
                / "manifest.jsonl").exists()


class TestPrintConfig:
    def test_dumps_defaults(self, capsys):
        assert run_cli("print-config") == 0
        parsed = yaml.safe_load(capsys.readouterr().out)
        assert parsed == yaml.safe_load(dump_config(ExperimentConfig()))

    def test_seed_override_applies_everywhere(self, capsys):
        run_cli("print-config", "--seed", "7")
        parsed = yaml.safe_load(capsys.readouterr().out)
        assert parsed["train"]["seed"] == 7
        assert parsed["data"]["seed"] == 7
        assert parsed["eval"]["seed"] == 7


class TestPretrain:
    def test_smoke_run_writes_checkpoints_and_log(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        assert run_cli("pretrain", "--config", path) == 0
        run_dirs = list((Path(cfg.out_dir) / "pretrain").iterdir())
        assert len(run_dirs) == 1
        ckpts = sorted(p.name for p in run_dirs[0].glob("checkpoint_*.pt"))
        assert ckpts == ["checkpoint_0001.pt", "checkpoint_0002.pt"]

        with (run_dirs[0] / "metrics.csv").open() as fh:
            lines = fh.read().splitlines()
        steps = 2 * (32 // 8)  # epochs * batches
        assert len(lines) == steps + 1
        assert (run_dirs[0] / "config.yaml").exists()

    def test_completed_run_not_mutated(self, cli_cfg, capsys):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        run_cli("pretrain", "--config", path)
        run_dir = next((Path(cfg.out_dir) / "pretrain").iterdir())
        stamp = {p.name: p.stat().st_mtime_ns for p in run_dir.iterdir()}
        assert run_cli("pretrain", "--config", path) == 0
        assert {p.name: p.stat().st_mtime_ns for p in run_dir.iterdir()} == stamp

    def test_resumed_log_has_no_step_gaps(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        run_cli("pretrain", "--config", path, "--stop-after-epoch", "1")
        assert run_cli("pretrain", "--config", path, "--resume") == 0
        run_dir = next((Path(cfg.out_dir) / "pretrain").iterdir())
        with (run_dir / "metrics.csv").open() as fh:
            steps = [int(r["step"]) for r in csv.DictReader(fh)]
        assert steps == list(range(len(steps)))


class TestProbeEvalDiagnose:
    @pytest.fixture
    def pretrained(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        run_cli("pretrain", "--config", path)
        return cfg, path

    def test_probe_writes_report(self, pretrained, capsys):
        cfg, path = pretrained
        assert run_cli("probe", "--config", path) == 0
        reports = list((Path(cfg.out_dir) / "probe").glob("linear_*.json"))
        assert len(reports) == 1
        blob = json.loads(reports[0].read_text())
        assert 0.0 <= blob["top1_test"] <= 1.0

    def test_eval_rows_match_video_count(self, pretrained):
        cfg, path = pretrained
        assert run_cli("eval", "--config", path) == 0
        with (Path(cfg.out_dir) / "eval" / "predictions.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == cfg.data.test_clips
        summary = json.loads((Path(cfg.out_dir) / "eval" / "summary.json").read_text())
        assert summary["videos"] == cfg.data.test_clips

    def test_diagnose_emits_reports_and_attention(self, pretrained):
        cfg, path = pretrained
        assert run_cli("diagnose", "--config", path, "--videos", "4") == 0
        out = Path(cfg.out_dir) / "diagnose"
        assert (out / "occlusion_rows.csv").exists()
        assert (out / "occlusion_summary.json").exists()
        assert (out / "attention_video0.npz").exists()
        with (out / "occlusion_rows.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 4


class TestAblate:
    def test_single_cell_grid(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        assert run_cli("ablate", "--config", path) == 0
        results = Path(cfg.out_dir) / "ablate" / "results.csv"
        with results.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["mode"] == "none"
        assert 0.0 <= float(rows[0]["probe_top1"]) <= 1.0
        assert rows[0]["finetune_top1"] == ""

    def test_rerun_skips_completed_cells(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        run_cli("ablate", "--config", path)
        cell_results = list((Path(cfg.out_dir) / "ablate" / "cells").rglob("result.json"))
        assert len(cell_results) == 1
        stamp = cell_results[0].stat().st_mtime_ns
        assert run_cli("ablate", "--config", path) == 0
        assert cell_results[0].stat().st_mtime_ns == stamp

    def test_cells_differ_only_by_sweep_keys(self, cli_cfg, tmp_path):
        # config-diff audit: two cells on the same seed may differ only in the
        # swept mask mode (and the derived fields that encode it)
        cfg, path = cli_cfg
        cfg.ablation.cells = [{"mask_mode": "none", "decay": 1.0},
                              {"mask_mode": "adversarial", "decay": 1.0}]
        save_config(cfg, path)
        run_cli("synth", "--config", path)
        run_cli("ablate", "--config", path)
        cell_cfgs = sorted((Path(cfg.out_dir) / "ablate" / "cells").rglob("config.yaml"))
        assert len(cell_cfgs) == 2
        a = yaml.safe_load(cell_cfgs[0].read_text())
        b = yaml.safe_load(cell_cfgs[1].read_text())

        def leaf_diffs(x, y, prefix=""):
            out = []
            for key in x:
                if isinstance(x[key], dict):
                    out += leaf_diffs(x[key], y[key], f"{prefix}{key}.")
                elif x[key] != y[key]:
                    out.append(f"{prefix}{key}")
            return out

        assert leaf_diffs(a, b) == ["train.mask_mode"]


class TestPlot:
    def test_empty_run_dir_errors_without_partial_files(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run_cli("plot", empty) == 2
        assert list(empty.rglob("*.png")) == []

    def test_missing_dir_errors(self, tmp_path):
        assert run_cli("plot", tmp_path / "nope") == 2

    def test_plots_match_metric_log(self, cli_cfg):
        cfg, path = cli_cfg
        run_cli("synth", "--config", path)
        run_cli("pretrain", "--config", path)
        run_cli("diagnose", "--config", path, "--videos", "4")
        assert run_cli("plot", cfg.out_dir) == 0
        plots = Path(cfg.out_dir) / "plots"
        assert (plots / "loss_curve.png").exists()
        assert (plots / "entropy_bars.png").exists()
        assert (plots / "attention_overlay.png").exists()

        # data files shipped with the figures must match their sources
        run_dir = next((Path(cfg.out_dir) / "pretrain").iterdir())
        with (run_dir / "metrics.csv").open() as fh:
            source = [(r["step"], r["contrast_loss"]) for r in csv.DictReader(fh)
                      if r["contrast_loss"]]
        with (plots / "loss_curve.csv").open() as fh:
            plotted = [(r["step"], r["contrast_loss"]) for r in csv.DictReader(fh)]
        assert plotted == source

        summary = json.loads((Path(cfg.out_dir) / "diagnose"
                              / "occlusion_summary.json").read_text())
        with (plots / "entropy_bars.csv").open() as fh:
            bars = {r["condition"]: float(r["mean_entropy"]) for r in csv.DictReader(fh)}
        assert bars["clean"] == summary["mean_entropy_clean"]
        assert bars["occluded"] == summary["mean_entropy_occluded"]
