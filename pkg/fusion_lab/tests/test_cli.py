"""
Tests for the typer command surface and the trend report
"""

import json

import pytest
from typer.testing import CliRunner

from fusion_lab.cli.main import app
from fusion_lab.cli.report_generator import build_markdown, collect_runs
from fusion_lab.dataflows.world import load_dataset
from fusion_lab.errors import FormatError
from fusion_lab.harness.records import EpochMetrics, RunRecord, write_run_record
from fusion_lab.harness.run_config import config_hash, save_run_config
from fusion_lab.tensor.rng import MAX_SEED

runner = CliRunner()


def _write_run(config, directory, best_bleu):
    epochs = [
        EpochMetrics(epoch=0, phase="single-task", task="caption", loss=2.0, bleu4=best_bleu, accuracy=None, encoder_calls=4, seconds=0.2)
    ]
    summary = {"initial_train_loss": 3.0, "final_train_loss": 2.0, "best_val_bleu4": best_bleu}
    return write_run_record(RunRecord(config, config_hash(config), epochs, summary, "f", "f"), directory)


class TestCommandErrors:
    """Exit codes"""

    def test_train_without_config(self):
        result = runner.invoke(app, ["train"])
        assert result.exit_code == 2

    def test_missing_config_file(self, tmp_path):
        result = runner.invoke(app, ["--config", str(tmp_path / "absent.json"), "train"])
        assert result.exit_code == 2

    def test_config_kind_must_fit_command(self, make_run_config, tmp_path):
        path = save_run_config(make_run_config("probe"), tmp_path / "probe.json")
        result = runner.invoke(app, ["--config", str(path), "train"])
        assert result.exit_code == 2

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"kind": "single-task-caption", "batch_size": 0}))
        result = runner.invoke(app, ["--config", str(path), "train"])
        assert result.exit_code == 2

    def test_seed_outside_u64(self, tmp_path):
        for seed in (str(MAX_SEED + 1), "-1"):
            result = runner.invoke(app, ["--seed", seed, "--out", str(tmp_path / "data"), "gen-data", "--n-scenes", "12"])
            assert result.exit_code == 2
        assert not (tmp_path / "data").exists()

    def test_report_on_unfinished_run(self, tmp_path):
        result = runner.invoke(app, ["--out", str(tmp_path / "out"), "report", str(tmp_path)])
        assert result.exit_code == 5


class TestCommands:
    """Commands that finish quickly"""

    def test_gen_data(self, tmp_path):
        result = runner.invoke(app, ["--seed", "2", "--out", str(tmp_path / "data"), "gen-data", "--n-scenes", "12"])
        assert result.exit_code == 0, result.output
        assert len(load_dataset(tmp_path / "data").samples) == 12

    def test_gen_data_largest_seed(self, tmp_path):
        result = runner.invoke(app, ["--seed", str(MAX_SEED), "--out", str(tmp_path / "data"), "gen-data", "--n-scenes", "12"])
        assert result.exit_code == 0, result.output
        assert load_dataset(tmp_path / "data").seed == MAX_SEED

    def test_report(self, make_run_config, tmp_path):
        config = make_run_config("single-task-caption")
        standard = _write_run(config.with_pipeline("standard"), tmp_path / "standard", 0.1)
        grounded = _write_run(config, tmp_path / "grounded", 0.3)
        result = runner.invoke(app, ["--out", str(tmp_path / "report"), "report", str(standard), str(grounded)])
        assert result.exit_code == 0, result.output
        text = (tmp_path / "report" / "trend_report.md").read_text()
        assert "difference +0.2000" in text
        assert (tmp_path / "report" / "trend_report.pdf").stat().st_size > 0
        assert (tmp_path / "report" / "trend_report.html").exists()


class TestTrendReport:
    """Markdown assembly"""

    def test_lists_every_run(self, make_run_config, tmp_path):
        config = make_run_config("single-task-caption")
        run = _write_run(config, tmp_path / "only", 0.3)
        text = build_markdown(collect_runs([run]))
        assert "| only | single-task-caption | grounded |" in text
        assert "Measured comparisons" not in text

    def test_missing_summary(self, tmp_path):
        with pytest.raises(FormatError):
            collect_runs([tmp_path])
