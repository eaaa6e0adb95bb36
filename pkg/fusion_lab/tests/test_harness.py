"""
Tests for run configs, run records, audits and the experiment drivers on the
tiny fixtures
"""

import json

import pytest

from fusion_lab.dataflows.captions import CAPTION_PROMPTS
from fusion_lab.dataflows.world import gen_dataset, make_sample, unique_prompts
from fusion_lab.errors import AuditError, ConfigError, FormatError, TrainingError
from fusion_lab.harness.audits import audit_batch, audit_frozen, audit_parameter_set
from fusion_lab.harness.benchmark import bench_epoch_time, bench_generation_time
from fusion_lab.harness.experiment_runner import (
    CAPTION,
    ExperimentRunner,
    grounding_ablation,
    schedule_for,
    train_single_task,
    training_items,
    zero_shot_eval,
)
from fusion_lab.harness.records import EpochMetrics, RunRecord, is_complete, load_run_record, write_run_record
from fusion_lab.harness.run_config import ExperimentKind, PipelineVariant, config_hash, load_run_config, save_run_config
from fusion_lab.harness.suites import run_alignment, run_probe_suite
from fusion_lab.harness.sweep import run_sweep
from fusion_lab.lab_configs import get_config, set_config
from fusion_lab.nn.optim import GradientDescent


def _without_seconds(epochs):
    return [{k: v for k, v in e.items() if k != "seconds"} for e in epochs]


def _unique_prompts_per_epoch(runner, epochs):
    items = training_items(runner.dataset.split("train"), CAPTION)
    return [unique_prompts(runner.prompt_ids(p) for p in runner.epoch_plan(items, e)[1]) for e in range(epochs)]


class TestRunConfig:
    """Validated experiment configs"""

    def test_hash_ignores_output_dir(self, make_run_config):
        first = make_run_config("single-task-caption")
        moved = make_run_config("single-task-caption", output_dir="/tmp/elsewhere")
        reseeded = make_run_config("single-task-caption", seed=4)
        assert config_hash(first) == config_hash(moved)
        assert config_hash(first) != config_hash(reseeded)

    def test_pipeline_pairs_differ_only_in_pipeline(self, make_run_config):
        grounded = make_run_config("single-task-caption")
        standard = grounded.with_pipeline("standard")
        assert standard.pipeline == PipelineVariant.STANDARD
        assert standard.model_dump(exclude={"pipeline"}) == grounded.model_dump(exclude={"pipeline"})

    def test_unknown_key(self, make_run_config):
        with pytest.raises(ConfigError):
            make_run_config("single-task-caption", learning_rate=0.1)

    def test_ablation_needs_grounded_pipeline(self, make_run_config):
        with pytest.raises(ConfigError):
            make_run_config("grounding-ablation", pipeline="standard")

    def test_heads_must_divide_qformer_dim(self, make_run_config):
        with pytest.raises(ConfigError):
            make_run_config("single-task-caption", qformer={"model_dim": 10, "num_heads": 4})

    def test_file_round_trip_with_overrides(self, make_run_config, tmp_path):
        path = save_run_config(make_run_config("probe"), tmp_path / "probe.json")
        loaded = load_run_config(path, seed=9)
        assert loaded.kind == ExperimentKind.PROBE
        assert loaded.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_schedules(self, make_run_config):
        assert [p.task for p in schedule_for(make_run_config("single-task-vqa"))] == ["vqa"]
        assert [p.task for p in schedule_for(make_run_config("multitask"))] == ["caption", "multitask"]
        with pytest.raises(ConfigError):
            schedule_for(make_run_config("align"))


class TestRunRecords:
    """Persisted run records"""

    def test_round_trip(self, make_run_config, tmp_path):
        config = make_run_config("single-task-caption")
        epochs = [
            EpochMetrics(epoch=0, phase="single-task", task="caption", loss=2.5, bleu4=None, accuracy=None, encoder_calls=3, seconds=0.1),
            EpochMetrics(epoch=1, phase="single-task", task="caption", loss=2.0, bleu4=0.25, accuracy=None, encoder_calls=0, seconds=0.1),
        ]
        record = RunRecord(config, config_hash(config), epochs, {"final_train_loss": 2.0}, "abc", "abc")
        root = write_run_record(record, tmp_path / "run")
        assert is_complete(root)
        loaded = load_run_record(root)
        assert loaded.config_hash == record.config_hash
        assert loaded.metric_series("bleu4") == [None, 0.25]
        assert loaded.metric_series("encoder_calls") == [3, 0]
        assert loaded.summary == {"final_train_loss": 2.0}
        assert loaded.fingerprint_before == "abc"

    def test_incomplete_run(self, tmp_path):
        assert not is_complete(tmp_path)
        with pytest.raises(FormatError):
            load_run_record(tmp_path)


class TestAudits:
    """Frozen, parameter-set and leakage audits"""

    def test_frozen_fingerprint(self, encdec_bundle):
        assert audit_frozen(encdec_bundle, encdec_bundle.fingerprint) == encdec_bundle.fingerprint
        with pytest.raises(AuditError):
            audit_frozen(encdec_bundle, "0" * 16)

    def test_parameter_set(self, encdec_bundle, make_qformer):
        qf = make_qformer(encdec_bundle)
        audit_parameter_set(GradientDescent(qf.parameters(), lr=0.1), qf, encdec_bundle)
        with pytest.raises(AuditError):
            audit_parameter_set(GradientDescent(qf.parameters()[1:], lr=0.1), qf, encdec_bundle)

    def test_holdout_in_batch(self):
        sample = make_sample(0, 5)
        with pytest.raises(AuditError):
            audit_batch([sample], [sample.scene.objects[0].combination])
        audit_batch([sample], [])


class TestTraining:
    """Fusion training on the tiny fixtures"""

    def test_single_task_caption(self, make_run_config, encdec_bundle, tiny_dataset):
        record = train_single_task(make_run_config("single-task-caption"), encdec_bundle, tiny_dataset)
        assert record.fingerprint_before == record.fingerprint_after == encdec_bundle.fingerprint
        assert len(record.epochs) == 1
        assert record.epochs[0]["bleu4"] is not None
        assert is_complete(record.run_dir)
        assert (record.checkpoint_dir / "qformer.json").exists()
        assert load_run_record(record.run_dir).summary["epochs"] == 1

    def test_encoder_calls_standard_vs_grounded(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("single-task-caption", phases={"single_task_epochs": 2, "caption_epochs": 1, "multitask_epochs": 1})
        train_size = len(tiny_dataset.split("train"))
        calls = {}
        for pipeline in ("standard", "grounded"):
            runner = ExperimentRunner(config.with_pipeline(pipeline), encdec_bundle, tiny_dataset)
            record, _ = runner.train(schedule_for(runner.config), evaluate=False)
            calls[pipeline] = record.metric_series("encoder_calls")
        assert calls["standard"] == [train_size, train_size]
        assert calls["grounded"] == _unique_prompts_per_epoch(runner, 2)
        assert all(1 <= c <= len(CAPTION_PROMPTS) for c in calls["grounded"])

    def test_grounded_calls_repeat_every_epoch(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("single-task-caption", phases={"single_task_epochs": 3, "caption_epochs": 1, "multitask_epochs": 1})
        runner = ExperimentRunner(config, encdec_bundle, tiny_dataset)
        record, _ = runner.train(schedule_for(config), evaluate=False)
        calls = record.metric_series("encoder_calls")
        assert calls == _unique_prompts_per_epoch(runner, 3)
        assert min(calls) >= 1
        assert record.summary["encoder_calls_total"] == sum(calls)

    def test_reruns_are_identical(self, make_run_config, encdec_bundle, tiny_dataset):
        runner = ExperimentRunner(make_run_config("single-task-caption"), encdec_bundle, tiny_dataset, single_thread=True)
        first, first_qf = runner.train(schedule_for(runner.config))
        second, second_qf = runner.train(schedule_for(runner.config))
        assert _without_seconds(first.epochs) == _without_seconds(second.epochs)
        assert (first_qf.query_tokens.data == second_qf.query_tokens.data).all()

    def test_grounded_decoder_only_training(self, make_run_config, deconly_bundle, tiny_dataset):
        config = make_run_config("single-task-caption", lm_kind="decoder-only", layer_n=1)
        runner = ExperimentRunner(config, deconly_bundle, tiny_dataset)
        record, _ = runner.train(schedule_for(config), evaluate=False)
        assert record.summary["pipeline_kind"] == "grounded-decoder-only"
        assert 1 <= record.epochs[0]["encoder_calls"] <= len(CAPTION_PROMPTS)

    def test_divergence_is_reported(self, make_run_config, encdec_bundle, tiny_dataset):
        runner = ExperimentRunner(make_run_config("single-task-caption"), encdec_bundle, tiny_dataset)
        threshold = get_config()["divergence_loss"]
        set_config({"divergence_loss": 1e-6})
        try:
            with pytest.raises(TrainingError) as info:
                runner.train(schedule_for(runner.config), evaluate=False)
        finally:
            set_config({"divergence_loss": threshold})
        assert info.value.epoch == 0
        assert info.value.step == 0


class TestExperiments:
    """Zero-shot, ablation, benchmark, sweep and analysis drivers"""

    def test_zero_shot_baseline(self, make_run_config, encdec_bundle):
        held = make_sample(0, 5).scene.objects[0].combination
        dataset = gen_dataset(5, 20, holdout=[held])
        config = make_run_config("zero-shot", holdout=[list(held)])
        qformer = ExperimentRunner(config, encdec_bundle, dataset).new_qformer()
        result = zero_shot_eval(config, qformer=qformer, bundle=encdec_bundle, dataset=dataset)
        assert result["questions"] >= 1
        assert 0.0 <= result["accuracy"] <= 1.0
        assert result["random_baseline"] == pytest.approx(1.0 / result["answer_vocabulary_size"])

    def test_grounding_ablation(self, make_run_config, encdec_bundle, tiny_dataset):
        grounded, empty, curves = grounding_ablation(make_run_config("grounding-ablation"), encdec_bundle, tiny_dataset)
        assert grounded.summary["data_order_digest"] == empty.summary["data_order_digest"]
        assert not grounded.summary["force_empty_grounding"]
        assert empty.summary["force_empty_grounding"]
        assert curves.exists()
        assert len(grounded.epochs) == len(empty.epochs) == 2

    def test_bench_epoch_time(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("bench-time", bench_warmup_epochs=1, bench_measured_epochs=1)
        report = bench_epoch_time(config, encdec_bundle, tiny_dataset, min_epoch_seconds=0.0)
        standard, grounded = report["timings"]["standard"], report["timings"]["grounded"]
        assert standard["encoder_calls_per_epoch"] == [report["samples"]] * 2
        assert grounded["encoder_calls_per_epoch"] == report["unique_prompts_per_epoch"]
        assert all(1 <= u <= len(CAPTION_PROMPTS) for u in report["unique_prompts_per_epoch"])
        runner = ExperimentRunner(config.with_pipeline("grounded"), encdec_bundle, tiny_dataset)
        assert report["unique_prompts_per_epoch"] == _unique_prompts_per_epoch(runner, 2)
        assert report["ratio"] > 0.0

    def test_bench_generation_time(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("bench-time")
        report = bench_generation_time(config, encdec_bundle, tiny_dataset, passes=2)
        standard, grounded = report["timings"]["standard"], report["timings"]["grounded"]
        assert standard["encoder_calls_per_pass"] == [report["samples"]] * 3
        assert grounded["encoder_calls_per_pass"] == [1] * 3
        assert len(grounded["pass_seconds"]) == 2

    def test_bench_refuses_short_epochs(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("bench-time", bench_warmup_epochs=1, bench_measured_epochs=1)
        with pytest.raises(ConfigError):
            bench_epoch_time(config, encdec_bundle, tiny_dataset, min_epoch_seconds=1e6)

    def test_sweep(self, make_run_config, encdec_bundle, tiny_dataset):
        config = make_run_config("single-task-caption")
        report = run_sweep(config, [1e-3, 1e-2], encdec_bundle, tiny_dataset, pipelines=(PipelineVariant.GROUNDED,))
        assert len(report.rows) == 2
        assert len(report.max_over_configs["grounded"]) == 1
        with pytest.raises(ConfigError):
            run_sweep(make_run_config("multitask"), [1e-3], encdec_bundle, tiny_dataset)

    def test_probe_suite(self, make_run_config, encdec_bundle, tiny_dataset, make_qformer, tmp_path):
        config = make_run_config("probe")
        reports = run_probe_suite(config, encdec_bundle, tiny_dataset, {"trained": make_qformer(encdec_bundle, seed=8)}, tmp_path)
        assert set(reports) == {"fresh", "trained"}
        assert [e.layer for e in reports["fresh"].entries] == [0, encdec_bundle.lm_depth]
        saved = json.loads((tmp_path / "probe_report.json").read_text())
        assert [t["target"] for t in saved["targets"]] == ["input embeddings", "encoder outputs"]
        assert (tmp_path / "probe_report-trained.json").exists()

    def test_layer_sweep_targets(self, make_run_config, deconly_bundle, tiny_dataset, tmp_path):
        config = make_run_config("layer-sweep", lm_kind="decoder-only")
        reports = run_probe_suite(config, deconly_bundle, tiny_dataset, out_dir=tmp_path)
        assert [e.layer for e in reports["fresh"].entries] == [0, 1, 2, 3]

    def test_alignment(self, make_run_config, encdec_bundle, tiny_dataset, tmp_path):
        heatmap = run_alignment(make_run_config("align"), encdec_bundle, tiny_dataset, tmp_path)
        assert heatmap.scores.shape == (encdec_bundle.lm_depth + 1, encdec_bundle.vision_depth + 1)
        assert ((heatmap.scores >= 0.0) & (heatmap.scores <= 1.0)).all()
        assert (tmp_path / "heatmap.csv").exists()
        assert json.loads((tmp_path / "heatmap.json").read_text())["k"] == 3
