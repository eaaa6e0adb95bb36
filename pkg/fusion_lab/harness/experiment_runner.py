"""
Experiment orchestration: one ExperimentRunner per configured run owns the
frozen bundle, the dataset, the QFormer state, its optimizer and its encoder
cache, trains through a phase schedule and persists a RunRecord.
"""

import hashlib
import logging
import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from ..dataflows.captions import caption_prompt, prompt_sampler, vqa_prompt
from ..dataflows.metrics import answer_vocabulary, bleu4, exact_match_accuracy
from ..dataflows.tokenizer import strip_special, terminated, tokenize
from ..dataflows.world import Dataset, Sample, audit_split, gen_dataset, load_dataset
from ..errors import ConfigError, ContractError, TrainingError
from ..frozen.bundle import FrozenBundle, FrozenConfig, build_frozen_bundle, load_bundle
from ..frozen.pretraining import PretrainRecipe
from ..lab_configs import get_config
from ..nn.optim import AdamW, GradientDescent, Optimizer
from ..pipelines.cache import EncoderCache
from ..pipelines.fusion import PipelineKind, generate, image_features, pipeline_kind, run_pipeline
from ..qformer.qformer import QFormerConfig, QFormerState, load_qformer, save_qformer
from ..tensor.core import Tensor, backward, no_grad
from ..tensor.rng import Rng
from .audits import audit_batch, audit_frozen, audit_parameter_set
from .records import EpochMetrics, RunRecord, write_run_record
from .run_config import ExperimentKind, OptimizerKind, RunConfig, config_hash

logger = logging.getLogger(__name__)

CAPTION = "caption"
VQA = "vqa"
MULTITASK = "multitask"


@dataclass(frozen=True)
class Phase:
    name: str
    task: str
    epochs: int


@dataclass(frozen=True)
class TrainItem:
    sample: Sample
    task: str
    qa_index: int = -1

    def question(self) -> str:
        return self.sample.qa[self.qa_index].question if self.task == VQA else ""

    def target_ids(self) -> List[int]:
        if self.task == CAPTION:
            return terminated(self.sample.caption_ids)
        return terminated(self.sample.qa[self.qa_index].answer_ids)


def schedule_for(config: RunConfig) -> List[Phase]:
    phases = config.phases
    if config.kind == ExperimentKind.SINGLE_TASK_CAPTION:
        return [Phase("single-task", CAPTION, phases.single_task_epochs)]
    if config.kind == ExperimentKind.SINGLE_TASK_VQA:
        return [Phase("single-task", VQA, phases.single_task_epochs)]
    if config.kind in (ExperimentKind.MULTITASK, ExperimentKind.ZERO_SHOT, ExperimentKind.GROUNDING_ABLATION):
        return [
            Phase("caption-pretrain", CAPTION, phases.caption_epochs),
            Phase("instruction", MULTITASK, phases.multitask_epochs),
        ]
    raise ConfigError(f"Experiment kind '{config.kind.value}' has no training schedule")


def training_items(samples: Sequence[Sample], task: str) -> List[TrainItem]:
    captions = [TrainItem(s, CAPTION) for s in samples]
    questions = [TrainItem(s, VQA, i) for s in samples for i in range(len(s.qa))]
    if task == CAPTION:
        return captions
    if task == VQA:
        return questions
    return captions + questions


def resolve_bundle(config: RunConfig) -> FrozenBundle:
    if config.bundle_dir:
        bundle = load_bundle(config.bundle_dir)
        if bundle.lm_kind != config.lm_kind:
            raise ConfigError(f"Bundle at {config.bundle_dir} is {bundle.lm_kind.value}, config asks for {config.lm_kind.value}")
        return bundle
    logger.info("No bundle_dir given; building a %s bundle from seed %d", config.lm_kind.value, config.seed)
    return build_frozen_bundle(config.seed, FrozenConfig.from_lab_config(lm_kind=config.lm_kind), PretrainRecipe.from_lab_config())


def resolve_dataset(config: RunConfig, n_scenes: Optional[int] = None) -> Dataset:
    if config.dataset_dir and n_scenes is None:
        return load_dataset(config.dataset_dir)
    return gen_dataset(config.seed, n_scenes or config.n_scenes, holdout=config.holdout, fractions=get_config()["split_fractions"])


@contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so reruns reproduce bitwise."""
    with threadpool_limits(limits=1) if enabled else nullcontext():
        yield


class ExperimentRunner:
    """Main class that runs one configured fusion experiment."""

    def __init__(
        self,
        config: RunConfig,
        bundle: Optional[FrozenBundle] = None,
        dataset: Optional[Dataset] = None,
        single_thread: Optional[bool] = None,
    ):
        """
        Args:
            config: Validated run configuration
            bundle: Frozen models; loaded or built from the config when omitted
            dataset: Synthetic world; loaded or generated from the config when omitted
            single_thread: Pin thread pools (defaults to the lab config)
        """
        self.config = config
        self.config_hash = config_hash(config)
        self.bundle = bundle or resolve_bundle(config)
        self.dataset = dataset or resolve_dataset(config)
        self.kind: PipelineKind = pipeline_kind(config.pipeline, self.bundle.lm_kind)
        self.single_thread = get_config()["single_thread"] if single_thread is None else single_thread
        self._features: Dict[int, Tensor] = {}
        self._prompt_ids: Dict[str, List[int]] = {}
        self.log_states_dict: Dict[str, Dict] = {}

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------
    def new_qformer(self, label: str = "qformer") -> QFormerState:
        """Fresh QFormer state; the same label always gives the same initialization."""
        settings = self.config.qformer
        qconfig = QFormerConfig.from_lab_config(
            self.bundle.config.vision.model_dim,
            self.bundle.config.lm.model_dim,
            self.bundle.config.lm.vocab_size,
            num_queries=settings.num_queries,
            model_dim=settings.model_dim,
            num_heads=settings.num_heads,
            ff_dim=settings.ff_dim,
            num_blocks=settings.num_blocks,
            cross_attention_frequency=settings.cross_attention_frequency,
            max_prompt_len=self.bundle.config.lm.max_seq_len,
        )
        return QFormerState(qconfig, Rng(self.config.seed).spawn(label), projection_init=settings.projection_init)

    def make_optimizer(self, qformer: QFormerState) -> Optimizer:
        settings = self.config.optimizer
        if settings.kind == OptimizerKind.GRADIENT_DESCENT:
            return GradientDescent(qformer.parameters(), lr=settings.lr)
        return AdamW(qformer.parameters(), lr=settings.lr, betas=tuple(settings.betas), weight_decay=settings.weight_decay)

    def features(self, sample: Sample) -> Tensor:
        """Vision features, computed once per sample per run."""
        if sample.index not in self._features:
            self._features[sample.index] = image_features(self.bundle, sample.image)
        return self._features[sample.index]

    def prompt_ids(self, text: str) -> List[int]:
        if text not in self._prompt_ids:
            self._prompt_ids[text] = tokenize(text)
        return self._prompt_ids[text]

    def forward(self, qformer: QFormerState, item: TrainItem, prompt: str, cache: EncoderCache, force_empty_grounding: bool = False):
        return run_pipeline(
            self.kind,
            self.bundle,
            qformer,
            self.features(item.sample),
            self.prompt_ids(prompt),
            item.target_ids(),
            cache=cache,
            layer_n=self.config.layer_n,
            force_empty_grounding=force_empty_grounding,
            order=self.config.concat_order,
        )

    def epoch_plan(self, items: List[TrainItem], epoch: int) -> Tuple[List[TrainItem], List[str]]:
        """Shuffled items and one sampled prompt per item; depends only on seed and epoch."""
        rng = Rng(self.config.seed).spawn("data")
        order = rng.spawn(f"epoch{epoch}").permutation(len(items))
        prompt_rng = rng.spawn(f"prompts{epoch}")
        planned = [items[int(i)] for i in order]
        prompts = [prompt_sampler(item.task)(prompt_rng, item.question()) for item in planned]
        return planned, prompts

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------
    def generate_ids(self, qformer: QFormerState, sample: Sample, prompt: str, cache: EncoderCache, force_empty_grounding: bool = False) -> List[int]:
        return generate(
            self.kind,
            self.bundle,
            qformer,
            self.features(sample),
            self.prompt_ids(prompt),
            self.config.max_generate_len,
            cache=cache,
            layer_n=self.config.layer_n,
            force_empty_grounding=force_empty_grounding,
            order=self.config.concat_order,
        ).generated_ids

    def evaluate(
        self,
        qformer: QFormerState,
        samples: Sequence[Sample],
        tasks: Sequence[str],
        cache: Optional[EncoderCache] = None,
        force_empty_grounding: bool = False,
    ) -> Dict[str, Optional[float]]:
        """Greedy-decoding BLEU-4 on captions and exact-match accuracy on the first question."""
        cache = cache or EncoderCache(self.bundle, enabled=self.kind.grounded)
        samples = list(samples)[: self.config.max_eval_samples]
        metrics: Dict[str, Optional[float]] = {"bleu4": None, "accuracy": None}
        if not samples:
            return metrics
        if CAPTION in tasks:
            candidates = [
                strip_special(self.generate_ids(qformer, s, caption_prompt(0), cache, force_empty_grounding)) for s in samples
            ]
            metrics["bleu4"] = bleu4(candidates, [s.caption_ids for s in samples])
        if VQA in tasks:
            asked = [s for s in samples if s.qa]
            predictions = [
                self.generate_ids(qformer, s, vqa_prompt(s.qa[0].question, 0), cache, force_empty_grounding) for s in asked
            ]
            metrics["accuracy"] = exact_match_accuracy(predictions, [s.qa[0].answer_ids for s in asked])
        return metrics

    def mean_loss(self, qformer: QFormerState, items: List[TrainItem], prompts: List[str], force_empty_grounding: bool = False) -> float:
        cache = EncoderCache(self.bundle, enabled=self.kind.grounded)
        with no_grad():
            losses = [self.forward(qformer, item, p, cache, force_empty_grounding).loss.item() for item, p in zip(items, prompts)]
        return float(np.mean(losses))

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------
    def train(
        self,
        schedule: Sequence[Phase],
        qformer: Optional[QFormerState] = None,
        force_empty_grounding: bool = False,
        evaluate: bool = True,
        on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    ) -> Tuple[RunRecord, QFormerState]:
        """
        Train the QFormer through the phase schedule.

        Args:
            schedule: Phases in order; epochs are counted across phases
            qformer: State to train (a fresh one when omitted)
            force_empty_grounding: Grounded pipelines run without grounding states
            evaluate: Compute validation metrics after every epoch
            on_epoch: Called with each epoch's metrics row

        Returns:
            tuple: (RunRecord, trained QFormerState)

        Raises:
            TrainingError: Non-finite or exploding loss, with epoch and step
            AuditError: Frozen, parameter-set or leakage audit failed
        """
        audit_split(self.dataset)
        qformer = qformer or self.new_qformer()
        optimizer = self.make_optimizer(qformer)
        audit_parameter_set(optimizer, qformer, self.bundle)
        cache = EncoderCache(self.bundle, enabled=self.kind.grounded)
        eval_cache = EncoderCache(self.bundle, enabled=self.kind.grounded)
        holdout = self.dataset.split_spec.holdout
        train_samples = self.dataset.split("train")
        val_samples = self.dataset.split("val")
        divergence = get_config()["divergence_loss"]
        fingerprint_before = self.bundle.current_fingerprint()
        order_digest = hashlib.blake2b(digest_size=8)

        epochs: List[EpochMetrics] = []
        boundaries = []
        initial_loss = None
        epoch = 0
        with single_threaded(self.single_thread):
            for phase in schedule:
                items = training_items(train_samples, phase.task)
                if not items:
                    raise ConfigError(f"Phase '{phase.name}' has no {phase.task} training items")
                boundaries.append({"phase": phase.name, "task": phase.task, "start_epoch": epoch, "end_epoch": epoch + phase.epochs - 1})
                for _ in range(phase.epochs):
                    planned, prompts = self.epoch_plan(items, epoch)
                    order_digest.update(repr([(i.sample.index, i.task, i.qa_index, p) for i, p in zip(planned, prompts)]).encode("utf-8"))
                    if initial_loss is None:
                        initial_loss = self.mean_loss(qformer, planned, prompts, force_empty_grounding)
                        logger.info("Initial train loss %.4f", initial_loss)

                    # each epoch encodes its unique prompts once, so encoder_calls is U per epoch
                    cache.clear()
                    calls_before = cache.encoder_calls
                    started = time.perf_counter()
                    total, steps = 0.0, 0
                    for start in range(0, len(planned), self.config.batch_size):
                        batch = planned[start:start + self.config.batch_size]
                        batch_prompts = prompts[start:start + self.config.batch_size]
                        audit_batch([item.sample for item in batch], holdout)
                        optimizer.zero_grad()
                        batch_loss = 0.0
                        for item, prompt in zip(batch, batch_prompts):
                            loss = self.forward(qformer, item, prompt, cache, force_empty_grounding).loss * (1.0 / len(batch))
                            batch_loss += loss.item()
                            backward(loss)
                        if not np.isfinite(batch_loss) or batch_loss > divergence:
                            raise TrainingError(f"Fusion training diverged with loss {batch_loss:.4g}", epoch=epoch, step=steps)
                        optimizer.step()
                        total += batch_loss * len(batch)
                        steps += 1
                    seconds = time.perf_counter() - started

                    metrics = {"bleu4": None, "accuracy": None}
                    if evaluate:
                        tasks = (CAPTION, VQA) if phase.task == MULTITASK else (phase.task,)
                        metrics = self.evaluate(qformer, val_samples, tasks, eval_cache, force_empty_grounding)
                    row = EpochMetrics(
                        epoch=epoch,
                        phase=phase.name,
                        task=phase.task,
                        loss=total / len(planned),
                        bleu4=metrics["bleu4"],
                        accuracy=metrics["accuracy"],
                        encoder_calls=cache.encoder_calls - calls_before,
                        seconds=seconds,
                    )
                    epochs.append(row)
                    logger.info(
                        "epoch %d [%s/%s] loss %.4f bleu4 %s accuracy %s encoder_calls %d (%.2fs)",
                        epoch, phase.name, phase.task, row["loss"], row["bleu4"], row["accuracy"], row["encoder_calls"], seconds,
                    )
                    if on_epoch:
                        on_epoch(row)
                    epoch += 1

        fingerprint_after = audit_frozen(self.bundle, fingerprint_before)
        record = RunRecord(
            config=self.config,
            config_hash=self.config_hash,
            epochs=epochs,
            summary=self._summarize(epochs, initial_loss, boundaries, cache, qformer, order_digest.hexdigest(), force_empty_grounding),
            fingerprint_before=fingerprint_before,
            fingerprint_after=fingerprint_after,
        )
        return record, qformer

    def _summarize(self, epochs, initial_loss, boundaries, cache, qformer, order_digest, force_empty_grounding) -> Dict:
        summary = {
            "pipeline_kind": self.kind.value,
            "lm_kind": self.bundle.lm_kind.value,
            "bundle_fingerprint": self.bundle.fingerprint,
            "force_empty_grounding": force_empty_grounding,
            "initial_train_loss": initial_loss,
            "final_train_loss": epochs[-1]["loss"] if epochs else None,
            "epochs": len(epochs),
            "phases": boundaries,
            "encoder_calls_total": cache.encoder_calls,
            "cache_hits": cache.cache_hits,
            "qformer_parameters": qformer.num_parameters(),
            "data_order_digest": order_digest,
        }
        for column in ("bleu4", "accuracy"):
            scored = [(e[column], e["epoch"]) for e in epochs if e[column] is not None]
            if scored:
                best, best_epoch = max(scored, key=lambda pair: (pair[0], -pair[1]))
                summary[f"best_val_{column}"] = best
                summary[f"best_epoch_{column}"] = best_epoch
        return summary

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------
    def run_dir(self, suffix: str = "") -> Path:
        name = f"{self.config.kind.value}-{self.config.pipeline.value}-{self.config_hash[:12]}{suffix}"
        return Path(self.config.output_dir) / name

    def _log_state(self, record: RunRecord, qformer: Optional[QFormerState] = None, suffix: str = "") -> Path:
        """Persist the record (and QFormer checkpoint) of one run."""
        directory = self.run_dir(suffix)
        if qformer is not None:
            save_qformer(qformer, directory / "qformer")
        write_run_record(record, directory)
        self.log_states_dict[directory.name] = record.summary
        return directory

    def run_training(self, **kwargs) -> Tuple[RunRecord, QFormerState]:
        record, qformer = self.train(schedule_for(self.config), **kwargs)
        self._log_state(record, qformer)
        return record, qformer


def _require_kind(config: RunConfig, kinds: Sequence[ExperimentKind], operation: str):
    if config.kind not in kinds:
        raise ConfigError(f"{operation} runs {[k.value for k in kinds]} experiments, config kind is '{config.kind.value}'")


def train_single_task(config: RunConfig, bundle: Optional[FrozenBundle] = None, dataset: Optional[Dataset] = None) -> RunRecord:
    """Train the configured pipeline on captioning or VQA alone."""
    _require_kind(config, (ExperimentKind.SINGLE_TASK_CAPTION, ExperimentKind.SINGLE_TASK_VQA), "train_single_task")
    record, _ = ExperimentRunner(config, bundle, dataset).run_training()
    return record


def train_multitask(config: RunConfig, bundle: Optional[FrozenBundle] = None, dataset: Optional[Dataset] = None) -> RunRecord:
    """Captioning phase, then mixed captioning + VQA with a sampled prompt per item."""
    _require_kind(config, (ExperimentKind.MULTITASK,), "train_multitask")
    record, _ = ExperimentRunner(config, bundle, dataset).run_training()
    return record


def zero_shot_eval(
    config: RunConfig,
    record: Optional[RunRecord] = None,
    qformer: Optional[QFormerState] = None,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
) -> Dict:
    """
    VQA accuracy on test scenes that contain held-out (shape, color) pairs.

    The QFormer comes from `qformer`, the record's checkpoint or
    config.qformer_checkpoint, in that order. The split is audited first.

    Raises:
        AuditError: A held-out pair reached train or val
    """
    runner = ExperimentRunner(config, bundle, dataset)
    audit_split(runner.dataset)
    if qformer is None:
        source = record.checkpoint_dir if record is not None and record.checkpoint_dir else config.qformer_checkpoint
        if source is None:
            raise ContractError("zero_shot_eval needs a trained QFormer, a run record or config.qformer_checkpoint")
        qformer = load_qformer(source)

    held = runner.dataset.holdout_samples()
    pairs = [(s, qa) for s in held for qa in s.qa]
    if not pairs:
        raise ConfigError("No held-out test questions; increase n_scenes or change the holdout pairs")
    cache = EncoderCache(runner.bundle, enabled=runner.kind.grounded)
    with single_threaded(runner.single_thread):
        predictions = [runner.generate_ids(qformer, s, vqa_prompt(qa.question, 0), cache) for s, qa in pairs]
    answers = [qa.answer_ids for _, qa in pairs]
    vocabulary = answer_vocabulary(answers)
    result = {
        "config_hash": runner.config_hash,
        "pipeline": config.pipeline.value,
        "holdout": [list(p) for p in runner.dataset.split_spec.holdout],
        "questions": len(pairs),
        "accuracy": exact_match_accuracy(predictions, answers),
        "random_baseline": 1.0 / len(vocabulary),
        "answer_vocabulary_size": len(vocabulary),
    }
    logger.info("Zero-shot accuracy %.3f on %d held-out questions (baseline %.3f)", result["accuracy"], len(pairs), result["random_baseline"])
    return result


def grounding_ablation(
    config: RunConfig,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
) -> Tuple[RunRecord, RunRecord, Path]:
    """
    The grounded pipeline with and without grounding states, matched seeds,
    same schedule; writes both records and ablation_curves.csv.

    Returns:
        tuple: (grounded record, empty-grounding record, curves path)
    """
    _require_kind(config, (ExperimentKind.GROUNDING_ABLATION,), "grounding_ablation")
    runner = ExperimentRunner(config, bundle, dataset)
    schedule = schedule_for(config)
    grounded, grounded_qf = runner.train(schedule, runner.new_qformer())
    empty, empty_qf = runner.train(schedule, runner.new_qformer(), force_empty_grounding=True)
    if grounded.summary["data_order_digest"] != empty.summary["data_order_digest"]:
        raise TrainingError("Ablation arms saw different data orders")
    grounded_dir = runner._log_state(grounded, grounded_qf, "-grounding")
    runner._log_state(empty, empty_qf, "-no-grounding")

    curves = pd.DataFrame(
        {
            "epoch": [e["epoch"] for e in grounded.epochs],
            "phase": [e["phase"] for e in grounded.epochs],
            "accuracy_grounded": grounded.metric_series("accuracy"),
            "accuracy_no_grounding": empty.metric_series("accuracy"),
            "bleu4_grounded": grounded.metric_series("bleu4"),
            "bleu4_no_grounding": empty.metric_series("bleu4"),
        }
    )
    curves_path = grounded_dir.parent / f"ablation_curves-{runner.config_hash[:12]}.csv"
    curves.to_csv(curves_path, index=False)
    return grounded, empty, curves_path
