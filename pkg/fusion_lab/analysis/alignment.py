"""
Mutual-KNN alignment between representation sets and cross-layer heatmaps.

Neighbors are computed independently inside each set (self excluded, ties
broken by ascending sample index); the score of a pair of sets is the mean
overlap fraction of every sample's two neighbor lists.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import ContractError
from ..frozen.bundle import lm_aggregate, vision_aggregate
from ..nn.blocks import LayerStates
from .representations import RepresentationSet, layer_sets

logger = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")


def _distances(points: np.ndarray, metric: str) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if metric == "cosine":
        norms = np.sqrt((x * x).sum(axis=1))
        if np.any(norms == 0.0):
            raise ContractError(f"Row {int(np.argmax(norms == 0.0))} has zero norm; cosine neighbors are undefined")
        unit = x / norms[:, None]
        return -(unit[:, None, :] * unit[None, :, :]).sum(axis=2)
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return (diff * diff).sum(axis=2)
    raise ContractError(f"Unknown neighbor metric '{metric}', expected one of {METRICS}")


def knn_indices(points: np.ndarray, k: int, metric: str = "cosine") -> np.ndarray:
    """[n, k] neighbor indices per row, nearest first, self excluded."""
    n = points.shape[0]
    if not 1 <= k < n:
        raise ContractError(f"k must satisfy 1 <= k < n_samples, got k={k}, n_samples={n}")
    dist = _distances(points, metric)
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def mutual_knn_alignment(a: RepresentationSet, b: RepresentationSet, k: int, metric: str = "cosine") -> float:
    """
    Mean over samples of |N_a(i) & N_b(i)| / k.

    Raises:
        ContractError: Sample counts differ, k >= n_samples, or a zero-norm row (cosine)
    """
    if a.n_samples != b.n_samples:
        raise ContractError(f"Sample counts differ: {a.n_samples} vs {b.n_samples}")
    neighbors_a = knn_indices(a.points, k, metric)
    neighbors_b = knn_indices(b.points, k, metric)
    overlap = [len(set(row_a) & set(row_b)) for row_a, row_b in zip(neighbors_a.tolist(), neighbors_b.tolist())]
    return float(np.mean(overlap)) / k


@dataclass
class AlignmentHeatmap:
    """Rows are LM layers, columns are vision layers."""

    scores: np.ndarray
    k: int
    metric: str = "cosine"
    row_labels: List[str] = field(default_factory=list)
    col_labels: List[str] = field(default_factory=list)

    @property
    def argmax_cell(self) -> Tuple[int, int]:
        # flattened argmax returns the first maximum: lowest row, then lowest column
        flat = int(np.argmax(self.scores))
        row, col = divmod(flat, self.scores.shape[1])
        return row, col

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.scores, index=self.row_labels, columns=self.col_labels)


def alignment_heatmap_from_sets(
    lm_sets: Sequence[RepresentationSet],
    vit_sets: Sequence[RepresentationSet],
    k: int,
    metric: str = "cosine",
) -> AlignmentHeatmap:
    if not lm_sets or not vit_sets:
        raise ContractError("Heatmap needs at least one layer on each side")
    counts = {s.n_samples for s in list(lm_sets) + list(vit_sets)}
    if len(counts) != 1:
        raise ContractError(f"All layers must cover the same samples, got sample counts {sorted(counts)}")
    scores = np.zeros((len(lm_sets), len(vit_sets)), dtype=np.float64)
    for i, lm_set in enumerate(lm_sets):
        for j, vit_set in enumerate(vit_sets):
            scores[i, j] = mutual_knn_alignment(lm_set, vit_set, k, metric)
    heatmap = AlignmentHeatmap(
        scores, k, metric, [s.label for s in lm_sets], [s.label for s in vit_sets]
    )
    logger.info("Alignment heatmap %s, max %.3f at %s", scores.shape, scores.max(), heatmap.argmax_cell)
    return heatmap


def alignment_heatmap(
    lm_states: Sequence[LayerStates],
    vit_states: Sequence[LayerStates],
    k: int,
    metric: str = "cosine",
) -> AlignmentHeatmap:
    """
    Cell (i, j) = alignment of LM layer-i final-token aggregates with vision
    layer-j first-token aggregates over the same samples.

    Args:
        lm_states: LayerStates of each sample's text through the LM
        vit_states: LayerStates of each sample's image through the vision encoder
        k: Neighbor count
        metric: "cosine" or "euclidean"
    """
    if len(lm_states) != len(vit_states):
        raise ContractError(f"Sample counts differ: {len(lm_states)} LM vs {len(vit_states)} vision")
    lm_sets = layer_sets(lm_states, lm_aggregate, "lm")
    vit_sets = layer_sets(vit_states, vision_aggregate, "vision")
    return alignment_heatmap_from_sets(lm_sets, vit_sets, k, metric)


def export_heatmap(heatmap: AlignmentHeatmap, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write heatmap.csv (score matrix) and heatmap.json (k, argmax, labels)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    csv_path = root / "heatmap.csv"
    json_path = root / "heatmap.json"
    heatmap.to_frame().to_csv(csv_path)
    with open(json_path, "w") as f:
        json.dump(
            {
                "k": heatmap.k,
                "metric": heatmap.metric,
                "argmax": list(heatmap.argmax_cell),
                "max_score": float(heatmap.scores.max()),
                "labels": {"rows": heatmap.row_labels, "cols": heatmap.col_labels},
            },
            f,
            indent=2,
        )
    return csv_path, json_path
