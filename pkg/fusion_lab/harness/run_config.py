import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError
from ..frozen.bundle import LMKind
from ..lab_configs import get_config
from ..pipelines.fusion import ConcatOrder
from ..tensor.rng import MAX_SEED


class ExperimentKind(str, Enum):
    SINGLE_TASK_CAPTION = "single-task-caption"
    SINGLE_TASK_VQA = "single-task-vqa"
    MULTITASK = "multitask"
    ZERO_SHOT = "zero-shot"
    PROBE = "probe"
    ALIGN = "align"
    BENCH_TIME = "bench-time"
    GROUNDING_ABLATION = "grounding-ablation"
    LAYER_SWEEP = "layer-sweep"


class PipelineVariant(str, Enum):
    STANDARD = "standard"
    GROUNDED = "grounded"


class OptimizerKind(str, Enum):
    ADAMW = "adamw"
    GRADIENT_DESCENT = "gradient-descent"


class ProbeCorpus(str, Enum):
    CAPTIONS = "captions"
    QUESTIONS = "questions"


_TRAINING_KINDS = {
    ExperimentKind.SINGLE_TASK_CAPTION,
    ExperimentKind.SINGLE_TASK_VQA,
    ExperimentKind.MULTITASK,
    ExperimentKind.ZERO_SHOT,
    ExperimentKind.GROUNDING_ABLATION,
}


def _lab(key: str):
    return get_config()[key]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class QFormerSettings(_Strict):
    num_queries: int = Field(default_factory=lambda: _lab("num_queries"), ge=1)
    model_dim: int = Field(default_factory=lambda: _lab("qformer_dim"), ge=1)
    num_heads: int = Field(default_factory=lambda: _lab("qformer_heads"), ge=1)
    ff_dim: int = Field(default_factory=lambda: _lab("qformer_ff_dim"), ge=1)
    num_blocks: int = Field(default_factory=lambda: _lab("qformer_blocks"), ge=1)
    cross_attention_frequency: int = Field(default_factory=lambda: _lab("cross_attention_frequency"), ge=1)
    projection_init: str = "normal"

    @model_validator(mode="after")
    def _heads_divide_dim(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.projection_init not in ("normal", "identity"):
            raise ValueError(f"projection_init must be 'normal' or 'identity', got '{self.projection_init}'")
        return self


class OptimizerSettings(_Strict):
    kind: OptimizerKind = OptimizerKind.ADAMW
    lr: float = Field(default_factory=lambda: _lab("lr"), gt=0)
    betas: Tuple[float, float] = Field(default_factory=lambda: tuple(_lab("betas")))
    weight_decay: float = Field(default_factory=lambda: _lab("weight_decay"), ge=0)


class PhaseSettings(_Strict):
    single_task_epochs: int = Field(default_factory=lambda: _lab("single_task_epochs"), ge=1)
    caption_epochs: int = Field(default_factory=lambda: _lab("caption_epochs"), ge=1)
    multitask_epochs: int = Field(default_factory=lambda: _lab("multitask_epochs"), ge=1)


class RunConfig(_Strict):
    """
    One experiment, as read from a JSON config file. Unknown keys are rejected.

    Two configs that differ only in `pipeline` form a comparison pair.
    """

    kind: ExperimentKind
    pipeline: PipelineVariant = PipelineVariant.GROUNDED
    lm_kind: LMKind = Field(default_factory=lambda: LMKind(_lab("lm_kind")))
    seed: int = Field(default=0, ge=0, le=MAX_SEED)
    bundle_dir: Optional[str] = None
    qformer_checkpoint: Optional[str] = None
    dataset_dir: Optional[str] = None
    n_scenes: int = Field(default_factory=lambda: _lab("n_scenes"), ge=10)
    holdout: List[Tuple[str, str]] = Field(default_factory=lambda: [tuple(p) for p in _lab("holdout")])
    qformer: QFormerSettings = Field(default_factory=QFormerSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    phases: PhaseSettings = Field(default_factory=PhaseSettings)
    batch_size: int = Field(default_factory=lambda: _lab("batch_size"), ge=1)
    layer_n: int = Field(default=0, ge=0)
    concat_order: ConcatOrder = ConcatOrder.CANONICAL
    max_eval_samples: int = Field(default_factory=lambda: _lab("max_eval_samples"), ge=1)
    max_generate_len: int = Field(default_factory=lambda: _lab("max_generate_len"), ge=1)
    knn_k: int = Field(default_factory=lambda: _lab("knn_k"), ge=1)
    knn_metric: str = Field(default_factory=lambda: _lab("knn_metric"))
    analysis_samples: int = Field(default=64, ge=2)
    probe_corpus: ProbeCorpus = ProbeCorpus.CAPTIONS
    probe_epochs: int = Field(default_factory=lambda: _lab("probe_epochs"), ge=0)
    probe_lr: float = Field(default_factory=lambda: _lab("probe_lr"), gt=0)
    bench_scenes: int = Field(default_factory=lambda: _lab("bench_scenes"), ge=10)
    bench_warmup_epochs: int = Field(default_factory=lambda: _lab("bench_warmup_epochs"), ge=1)
    bench_measured_epochs: int = Field(default_factory=lambda: _lab("bench_measured_epochs"), ge=1)
    learning_rates: List[float] = Field(default_factory=list)
    output_dir: str = Field(default_factory=lambda: _lab("results_dir"))

    @model_validator(mode="after")
    def _consistent(self):
        if self.knn_metric not in ("cosine", "euclidean"):
            raise ValueError(f"knn_metric must be 'cosine' or 'euclidean', got '{self.knn_metric}'")
        if self.kind == ExperimentKind.GROUNDING_ABLATION and self.pipeline != PipelineVariant.GROUNDED:
            raise ValueError("grounding-ablation compares two grounded arms; set pipeline to 'grounded'")
        if self.kind == ExperimentKind.ZERO_SHOT and not self.holdout:
            raise ValueError("zero-shot needs at least one holdout combination")
        if self.kind in (ExperimentKind.ALIGN,) and self.knn_k >= self.analysis_samples:
            raise ValueError(f"knn_k {self.knn_k} must be smaller than analysis_samples {self.analysis_samples}")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning_rates must all be positive")
        return self

    @property
    def trains(self) -> bool:
        return self.kind in _TRAINING_KINDS

    def with_pipeline(self, pipeline: Union[PipelineVariant, str]) -> "RunConfig":
        return self.model_copy(update={"pipeline": PipelineVariant(pipeline)})

    def with_lr(self, lr: float) -> "RunConfig":
        return self.model_copy(update={"optimizer": self.optimizer.model_copy(update={"lr": lr})})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical config JSON; the output directory does not count."""
    return hashlib.sha256(config.canonical_json().encode("utf-8")).hexdigest()


def load_run_config(path: Union[str, Path], **overrides) -> RunConfig:
    """
    Read and validate a RunConfig JSON file.

    Args:
        path: Config file
        **overrides: Top-level fields replacing file values (e.g. seed, output_dir)

    Raises:
        ConfigError: Missing file, bad JSON or schema violation
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_run_config(data)


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(config.model_dump_json(indent=2))
    return path
