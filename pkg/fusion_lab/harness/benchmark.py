"""
Wall-clock benchmarks of standard vs grounded pipelines: per-epoch training
time and per-pass generation time, both single-threaded with warmup excluded.
"""

import json
import logging
import statistics
import time
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

from ..dataflows.captions import caption_prompt
from ..dataflows.world import Dataset, unique_prompts
from ..errors import ConfigError
from ..frozen.bundle import FrozenBundle
from ..lab_configs import get_config
from ..pipelines.cache import EncoderCache
from .experiment_runner import CAPTION, ExperimentRunner, Phase, resolve_bundle, resolve_dataset, single_threaded, training_items
from .run_config import PipelineVariant, RunConfig

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = (PipelineVariant.STANDARD, PipelineVariant.GROUNDED)


def _ratio(timings: Dict[str, Dict], variants: Sequence[PipelineVariant], key: str) -> float:
    first, second = (timings[v.value][key] for v in variants)
    return second / first


def bench_epoch_time(
    config: RunConfig,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
    variants: Sequence[PipelineVariant] = DEFAULT_VARIANTS,
    min_epoch_seconds: Optional[float] = None,
) -> Dict:
    """
    Median training-epoch time of each pipeline on single-task captioning.

    Both sides share the bundle, the dataset and every config field except
    `pipeline`. Each side gets a fresh QFormer; the grounded side encodes its
    unique prompts once per epoch and the standard side once per sample.

    Args:
        config: Base config (its pipeline field is overridden per side)
        variants: (reference, candidate); ratio = candidate / reference
        min_epoch_seconds: Timer floor below which the benchmark is refused

    Raises:
        ConfigError: Median epoch shorter than the floor
    """
    floor = get_config()["min_epoch_seconds"] if min_epoch_seconds is None else min_epoch_seconds
    bundle = bundle or resolve_bundle(config)
    dataset = dataset or resolve_dataset(config, n_scenes=config.bench_scenes)
    schedule = [Phase("bench", CAPTION, config.bench_warmup_epochs + config.bench_measured_epochs)]

    timings: Dict[str, Dict] = {}
    for variant in variants:
        runner = ExperimentRunner(config.with_pipeline(variant), bundle, dataset, single_thread=True)
        for sample in dataset.split("train"):
            runner.features(sample)
        record, _ = runner.train(schedule, evaluate=False)
        measured = record.epochs[config.bench_warmup_epochs:]
        median = statistics.median(e["seconds"] for e in measured)
        if median < floor:
            raise ConfigError(
                f"Median epoch of {median * 1e3:.2f} ms is below the {floor * 1e3:.0f} ms timer floor; use more bench_scenes"
            )
        timings[variant.value] = {
            "median_epoch_seconds": median,
            "epoch_seconds": [e["seconds"] for e in measured],
            "encoder_calls_per_epoch": [e["encoder_calls"] for e in record.epochs],
        }
        logger.info("%s: median epoch %.3fs", variant.value, median)

    train = dataset.split("train")
    items = training_items(train, CAPTION)
    report = {
        "samples": len(train),
        "unique_prompts_per_epoch": [
            unique_prompts(runner.prompt_ids(p) for p in runner.epoch_plan(items, epoch)[1]) for epoch in range(len(record.epochs))
        ],
        "warmup_epochs": config.bench_warmup_epochs,
        "measured_epochs": config.bench_measured_epochs,
        "variants": [v.value for v in variants],
        "timings": timings,
        "ratio": _ratio(timings, variants, "median_epoch_seconds"),
    }
    return report


def bench_generation_time(
    config: RunConfig,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
    variants: Sequence[PipelineVariant] = DEFAULT_VARIANTS,
    passes: int = 3,
) -> Dict:
    """
    Median wall time of one greedy captioning pass over the validation
    samples per pipeline (first pass is warmup), with encoder calls per pass.
    Grounded passes encode each unique prompt once per pass.
    """
    bundle = bundle or resolve_bundle(config)
    dataset = dataset or resolve_dataset(config)
    samples = dataset.split("val")[: config.max_eval_samples]
    timings: Dict[str, Dict] = {}
    for variant in variants:
        runner = ExperimentRunner(config.with_pipeline(variant), bundle, dataset, single_thread=True)
        qformer = runner.new_qformer()
        cache = EncoderCache(bundle, enabled=runner.kind.grounded)
        for sample in samples:
            runner.features(sample)
        seconds, calls = [], []
        with single_threaded(True):
            for _ in range(passes + 1):
                cache.clear()
                before = cache.encoder_calls
                started = time.perf_counter()
                for sample in samples:
                    runner.generate_ids(qformer, sample, caption_prompt(0), cache)
                seconds.append(time.perf_counter() - started)
                calls.append(cache.encoder_calls - before)
        timings[variant.value] = {
            "median_pass_seconds": statistics.median(seconds[1:]),
            "pass_seconds": seconds[1:],
            "encoder_calls_per_pass": calls,
        }
    return {
        "samples": len(samples),
        "passes": passes,
        "variants": [v.value for v in variants],
        "timings": timings,
        "ratio": _ratio(timings, variants, "median_pass_seconds"),
    }


def write_bench_report(report: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
    return path
