"""
Linear-probe regression from QFormer outputs onto LM representations.

A probe is one affine map trained by full-batch gradient descent on an L2
objective. Source and target are standardized per dimension first, so the
reported per-element error is comparable across targets: 0 means perfectly
linearly predictable, 1 means no better than predicting the mean.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, RangeError, TrainingError
from ..frozen.bundle import lm_aggregate
from ..lab_configs import get_config
from ..nn.blocks import LayerStates
from ..nn.optim import GradientDescent
from ..tensor.core import Tensor, backward, matmul, precision
from ..tensor.rng import Rng
from .representations import RepresentationSet

logger = logging.getLogger(__name__)


@dataclass
class StandardizationStats:
    mean: List[float]
    std: List[float]
    floored_dims: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def standardize_targets(rep: RepresentationSet, variance_floor: Optional[float] = None) -> Tuple[RepresentationSet, StandardizationStats]:
    """
    Zero mean and unit variance per dimension over the sample axis.

    Dimensions with variance below the floor are divided by sqrt(floor)
    instead, which maps constant dimensions to zeros; each one is logged and
    listed in the returned stats.
    """
    floor = variance_floor if variance_floor is not None else get_config()["variance_floor"]
    x = rep.points.astype(np.float64)
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    floored = np.flatnonzero(var < floor)
    warnings = []
    if floored.size:
        message = f"{rep.label or 'representation'}: {floored.size} dimension(s) with variance below {floor:g} floored"
        logger.warning(message)
        warnings.append(message)
    std = np.sqrt(np.maximum(var, floor))
    standardized = RepresentationSet((x - mean) / std, rep.label)
    return standardized, StandardizationStats(mean.tolist(), std.tolist(), floored.tolist(), warnings)


@dataclass
class ProbeEntry:
    target_label: str
    losses: List[float]
    target_stats: StandardizationStats
    source_stats: StandardizationStats
    layer: Optional[int] = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def epochs(self) -> int:
        return len(self.losses) - 1

    def to_dict(self) -> dict:
        return {
            "target": self.target_label,
            "layer": self.layer,
            "final_loss": self.final_loss,
            "losses": self.losses,
            "floored_target_dims": self.target_stats.floored_dims,
            "warnings": self.source_stats.warnings + self.target_stats.warnings,
        }


@dataclass
class ProbeReport:
    source_label: str
    entries: List[ProbeEntry] = field(default_factory=list)
    provenance: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def final_losses(self) -> List[float]:
        return [e.final_loss for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "source": self.source_label,
            "provenance": self.provenance,
            "targets": [e.to_dict() for e in self.entries],
        }


def probe_regress(
    source: RepresentationSet,
    target: RepresentationSet,
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    rng: Optional[Rng] = None,
) -> ProbeEntry:
    """
    Fit target ~ source @ W + b and record the per-element MSE curve.

    Args:
        source: Probe input, standardized internally
        target: Probe output, standardized internally
        epochs: Full-batch gradient steps (0 reports only the initial loss)
        lr: Step size
        rng: Stream for the weight initialization

    Returns:
        ProbeEntry: losses[0] is the loss before training, losses[e] after epoch e

    Raises:
        TrainingError: The loss became non-finite
    """
    config = get_config()
    epochs = config["probe_epochs"] if epochs is None else epochs
    lr = config["probe_lr"] if lr is None else lr
    rng = rng or Rng(0)
    if source.n_samples != target.n_samples:
        raise ContractError(f"Source has {source.n_samples} samples, target has {target.n_samples}")
    if epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {epochs}")

    source_std, source_stats = standardize_targets(source)
    target_std, target_stats = standardize_targets(target)
    n, d_t = target_std.n_samples, target_std.dim

    with precision("float64"):
        x = Tensor(source_std.points)
        y = Tensor(target_std.points)
        weight = Tensor(rng.normal((source_std.dim, d_t), std=0.01), requires_grad=True, name="probe.weight")
        bias = Tensor(np.zeros(d_t), requires_grad=True, name="probe.bias")
        optimizer = GradientDescent([weight, bias], lr=lr)

        def objective() -> Tensor:
            # squared error summed over target dims, averaged over samples
            diff = matmul(x, weight) + bias - y
            return (diff * diff).sum() * (1.0 / n)

        losses = []
        for epoch in range(epochs + 1):
            optimizer.zero_grad()
            loss = objective()
            value = loss.item() / d_t
            if not np.isfinite(value):
                raise TrainingError(f"Probe onto '{target.label}' diverged", epoch=epoch)
            losses.append(value)
            if epoch < epochs:
                backward(loss)
                optimizer.step()

    logger.debug("Probe onto %s: loss %.4f -> %.4f", target.label, losses[0], losses[-1])
    return ProbeEntry(target.label, losses, target_stats, source_stats)


def layer_target_sweep(
    source: RepresentationSet,
    lm_states: Union[Sequence[LayerStates], Sequence[RepresentationSet]],
    layer_indices: Sequence[int],
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    rng: Optional[Rng] = None,
    labels: Optional[Dict[int, str]] = None,
) -> ProbeReport:
    """
    Probe the source onto each requested layer's aggregate representations.

    Args:
        source: QFormer-side representation
        lm_states: Per-sample LayerStates (final-token aggregates are taken), or
            one ready RepresentationSet per layer
        layer_indices: Layers to probe; the report is ordered by index
        labels: Optional display label per layer index
    """
    rng = rng or Rng(0)
    report = ProbeReport(source.label)
    if not layer_indices:
        return report

    if lm_states and isinstance(lm_states[0], RepresentationSet):
        per_layer = {i: s for i, s in enumerate(lm_states)}
        depth = len(lm_states) - 1
    else:
        depth = lm_states[0].depth if lm_states else -1
        per_layer = {}
    for index in layer_indices:
        if not 0 <= index <= depth:
            raise RangeError(f"Probe layer {index} is outside 0..{depth}")

    for index in sorted(set(layer_indices)):
        label = (labels or {}).get(index, f"lm layer {index} aggregate")
        if index in per_layer:
            target = RepresentationSet(per_layer[index].points, label)
        else:
            target = RepresentationSet.from_rows([lm_aggregate(s[index]) for s in lm_states], label)
        entry = probe_regress(source, target, epochs, lr, rng.spawn(f"layer{index}"))
        entry.layer = index
        report.entries.append(entry)
        logger.info("Probe %s -> %s: final loss %.4f", source.label, label, entry.final_loss)
    return report


def save_probe_report(report: ProbeReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    return path
