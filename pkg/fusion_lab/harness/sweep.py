"""
Learning-rate sweep over both pipelines on single-task captioning with a fixed
epoch budget; reports the best score reached per config and the max over
configs per epoch.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from ..dataflows.world import Dataset
from ..errors import ConfigError
from ..frozen.bundle import FrozenBundle
from .experiment_runner import ExperimentRunner, resolve_bundle, resolve_dataset
from .records import RunRecord
from .run_config import ExperimentKind, PipelineVariant, RunConfig

logger = logging.getLogger(__name__)


@dataclass
class SweepReport:
    rows: List[Dict] = field(default_factory=list)
    max_over_configs: Dict[str, List[Optional[float]]] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def best(self, pipeline: str) -> Optional[float]:
        scores = [v for v in self.max_over_configs.get(pipeline, []) if v is not None]
        return max(scores) if scores else None


def run_sweep(
    config: RunConfig,
    learning_rates: Optional[Sequence[float]] = None,
    bundle: Optional[FrozenBundle] = None,
    dataset: Optional[Dataset] = None,
    pipelines: Sequence[PipelineVariant] = (PipelineVariant.STANDARD, PipelineVariant.GROUNDED),
) -> SweepReport:
    """
    Args:
        config: A single-task-caption config; its epoch budget applies to every run
        learning_rates: Optimizer learning rates (defaults to config.learning_rates)
    """
    if config.kind != ExperimentKind.SINGLE_TASK_CAPTION:
        raise ConfigError(f"Sweeps run single-task-caption configs, got '{config.kind.value}'")
    learning_rates = list(learning_rates or config.learning_rates)
    if not learning_rates:
        raise ConfigError("Sweep needs at least one learning rate")
    bundle = bundle or resolve_bundle(config)
    dataset = dataset or resolve_dataset(config)

    report = SweepReport()
    for pipeline in pipelines:
        curves = []
        for lr in learning_rates:
            run_config = config.with_pipeline(pipeline).with_lr(lr)
            record, _ = ExperimentRunner(run_config, bundle, dataset).run_training()
            curves.append(record.metric_series("bleu4"))
            report.rows.append(_row(record, pipeline, lr))
        report.max_over_configs[pipeline.value] = [
            max((c[e] for c in curves if c[e] is not None), default=None) for e in range(len(curves[0]))
        ]
        logger.info("Sweep %s: best BLEU-4 %s", pipeline.value, report.best(pipeline.value))
    return report


def _row(record: RunRecord, pipeline: PipelineVariant, lr: float) -> Dict:
    return {
        "pipeline": pipeline.value,
        "lr": lr,
        "config_hash": record.config_hash,
        "best_val_bleu4": record.summary.get("best_val_bleu4"),
        "best_epoch": record.summary.get("best_epoch_bleu4"),
        "final_train_loss": record.summary.get("final_train_loss"),
    }


def write_sweep_report(report: SweepReport, directory: Union[str, Path]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(root / "sweep.csv", index=False)
    with open(root / "sweep.json", "w") as f:
        json.dump({"runs": report.rows, "max_over_configs": report.max_over_configs}, f, indent=2)
    return root
