"""
Persisted run records: metrics.csv, summary.json, config.json and the
completion manifest run.json, which is written last.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Dict, List, Optional, Union

import pandas as pd
from typing_extensions import TypedDict

from ..errors import FormatError
from .run_config import RunConfig, parse_run_config, save_run_config

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "phase", "task", "loss", "bleu4", "accuracy", "encoder_calls", "seconds"]
MANIFEST_NAME = "run.json"


class EpochMetrics(TypedDict):
    epoch: Annotated[int, "Epoch index, counted across phases"]
    phase: Annotated[str, "Schedule phase the epoch belongs to"]
    task: Annotated[str, "caption, vqa or multitask"]
    loss: Annotated[float, "Mean training loss over the epoch's items"]
    bleu4: Annotated[Optional[float], "Validation BLEU-4 of generated captions"]
    accuracy: Annotated[Optional[float], "Validation exact-match VQA accuracy"]
    encoder_calls: Annotated[int, "Frozen LM encoder invocations during training"]
    seconds: Annotated[float, "Wall-clock training time of the epoch"]


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    epochs: List[EpochMetrics] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    fingerprint_before: str = ""
    fingerprint_after: str = ""
    run_dir: Optional[str] = None

    @property
    def checkpoint_dir(self) -> Optional[Path]:
        return Path(self.run_dir) / "qformer" if self.run_dir else None

    def metric_series(self, column: str) -> List[Optional[float]]:
        return [e[column] for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.epochs, columns=METRIC_COLUMNS)


def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_run_record(record: RunRecord, directory: Union[str, Path]) -> Path:
    """
    Write the record into `directory`; run.json goes last through a
    temporary file and os.replace so readers see either nothing or a
    complete run.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    record.to_frame().to_csv(root / "metrics.csv", index=False)
    save_run_config(record.config, root / "config.json")
    summary = {
        "config_hash": record.config_hash,
        "kind": record.config.kind.value,
        "pipeline": record.config.pipeline.value,
        "fingerprint_before": record.fingerprint_before,
        "fingerprint_after": record.fingerprint_after,
        **record.summary,
    }
    with open(root / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, default=str)

    tmp = root / f".{MANIFEST_NAME}.tmp"
    with open(tmp, "w") as f:
        json.dump({"config_hash": record.config_hash, "epochs": len(record.epochs), "complete": True}, f, indent=2)
    os.replace(tmp, root / MANIFEST_NAME)
    record.run_dir = str(root)
    logger.info("Run record written to %s", root)
    return root


def load_run_record(directory: Union[str, Path]) -> RunRecord:
    root = Path(directory)
    if not (root / MANIFEST_NAME).exists():
        raise FormatError(f"{root} holds no completed run (missing {MANIFEST_NAME})")
    try:
        with open(root / "config.json") as f:
            config = parse_run_config(json.load(f))
        with open(root / "summary.json") as f:
            summary = json.load(f)
        frame = pd.read_csv(root / "metrics.csv")
    except (OSError, json.JSONDecodeError, pd.errors.ParserError) as e:
        raise FormatError(f"Could not read run record in {root}: {e}") from e
    epochs = [
        EpochMetrics(**{column: _clean(row[column]) for column in METRIC_COLUMNS})
        for row in frame.to_dict(orient="records")
    ]
    config_hash = summary.pop("config_hash")
    before = summary.pop("fingerprint_before", "")
    after = summary.pop("fingerprint_after", "")
    for key in ("kind", "pipeline"):
        summary.pop(key, None)
    return RunRecord(config, config_hash, epochs, summary, before, after, str(root))


def is_complete(directory: Union[str, Path]) -> bool:
    return (Path(directory) / MANIFEST_NAME).exists()
