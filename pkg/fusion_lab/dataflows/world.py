"""
Synthetic vision-language dataset: rendered scenes, captions, QA pairs and
splits with a compositional holdout.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import AuditError, ConfigError, FormatError
from ..frozen.image import Image
from ..tensor.rng import Rng
from ..tensor.serialization import load_tensor, save_tensor
from .captions import caption_scene, sample_questions
from .scenes import Scene, render, sample_scene
from .tokenizer import tokenize

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MIN_SCENES = 10


@dataclass
class QAPair:
    question: str
    answer: str
    question_ids: List[int]
    answer_ids: List[int]


@dataclass
class Sample:
    index: int
    scene: Scene
    image: Image
    caption: str
    caption_ids: List[int]
    qa: List[QAPair] = field(default_factory=list)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint index sets plus the (shape, color) pairs reserved for test."""

    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]
    holdout: Tuple[Tuple[str, str], ...] = ()

    def indices(self, split: str) -> Tuple[int, ...]:
        if split not in SPLITS:
            raise ConfigError(f"Unknown split '{split}', expected one of {SPLITS}")
        return getattr(self, split)

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "holdout": [list(pair) for pair in self.holdout],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitSpec":
        return cls(
            train=tuple(data["train"]),
            val=tuple(data["val"]),
            test=tuple(data["test"]),
            holdout=tuple(tuple(pair) for pair in data["holdout"]),
        )


@dataclass
class Dataset:
    seed: int
    samples: List[Sample]
    split_spec: SplitSpec

    def split(self, name: str) -> List[Sample]:
        return [self.samples[i] for i in self.split_spec.indices(name)]

    def holdout_samples(self) -> List[Sample]:
        """Test samples containing at least one held-out combination."""
        return [s for s in self.split("test") if s.scene.contains_any(self.split_spec.holdout)]


def make_sample(index: int, seed: int) -> Sample:
    """Sample `index` depends only on (seed, index)."""
    scene_seed = Rng(seed).spawn(f"scene{index}").seed
    rng = Rng(scene_seed)
    scene = sample_scene(rng.spawn("layout"), seed=scene_seed)
    caption = caption_scene(scene)
    qa = [
        QAPair(q, a, tokenize(q, strict=True), tokenize(a, strict=True))
        for q, a in sample_questions(scene, rng.spawn("questions"))
    ]
    return Sample(index, scene, render(scene), caption, tokenize(caption, strict=True), qa)


def gen_dataset(
    seed: int,
    n_scenes: int,
    holdout: Sequence[Tuple[str, str]] = (("circle", "red"),),
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Dataset:
    """
    Generate scenes and split them.

    Scenes containing a held-out (shape, color) pair go to test; the remaining
    scenes are shuffled and divided by `fractions`.

    Args:
        seed: Dataset seed
        n_scenes: Number of scenes, at least 10
        holdout: (shape, color) combinations excluded from train and val
        fractions: train/val/test shares of the non-holdout scenes
    """
    if n_scenes < MIN_SCENES:
        raise ConfigError(f"n_scenes must be >= {MIN_SCENES}, got {n_scenes}")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ConfigError(f"Split fractions must be three non-negative shares summing to 1, got {fractions}")
    holdout = tuple(tuple(pair) for pair in holdout)

    samples = [make_sample(i, seed) for i in range(n_scenes)]
    held = [s.index for s in samples if s.scene.contains_any(holdout)]
    free = [s.index for s in samples if not s.scene.contains_any(holdout)]
    if not free:
        raise ConfigError("The holdout rule excludes every scene; nothing is left to train on")

    order = [free[i] for i in Rng(seed).spawn("split").permutation(len(free))]
    n_train = max(int(round(fractions[0] * len(order))), 1)
    n_val = int(round(fractions[1] * len(order)))
    spec = SplitSpec(
        train=tuple(sorted(order[:n_train])),
        val=tuple(sorted(order[n_train:n_train + n_val])),
        test=tuple(sorted(order[n_train + n_val:] + held)),
        holdout=holdout,
    )
    logger.info(
        "Generated %d scenes (train=%d, val=%d, test=%d, holdout scenes=%d)",
        n_scenes, len(spec.train), len(spec.val), len(spec.test), len(held),
    )
    return Dataset(seed=seed, samples=samples, split_spec=spec)


def audit_split(dataset: Dataset):
    """Raise AuditError if splits overlap or a holdout pair leaks into train/val."""
    spec = dataset.split_spec
    seen: Dict[int, str] = {}
    for name in SPLITS:
        for index in spec.indices(name):
            if index in seen:
                raise AuditError(f"Sample {index} is in both {seen[index]} and {name}")
            seen[index] = name
    for name in ("train", "val"):
        for sample in dataset.split(name):
            if sample.scene.contains_any(spec.holdout):
                raise AuditError(
                    f"Holdout combination found in {name} sample {sample.index}: {sorted(sample.scene.combinations())}"
                )


def unique_prompts(prompts: Iterable[Sequence[int]]) -> int:
    return len({tuple(p) for p in prompts})


def save_dataset(dataset: Dataset, directory: str) -> Path:
    """
    One directory per split with images.tnsr ([n, 3, H, W]) and records.jsonl,
    plus manifest.json at the top.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        split_dir = root / name
        split_dir.mkdir(exist_ok=True)
        samples = dataset.split(name)
        if samples:
            save_tensor(np.stack([s.image.pixels for s in samples]), split_dir / "images.tnsr")
        records = pd.DataFrame(
            [
                {
                    "index": s.index,
                    "scene": s.scene.to_dict(),
                    "caption": s.caption,
                    "caption_ids": s.caption_ids,
                    "qa": [[p.question, p.answer] for p in s.qa],
                }
                for s in samples
            ],
            columns=["index", "scene", "caption", "caption_ids", "qa"],
        )
        records.to_json(split_dir / "records.jsonl", orient="records", lines=True)
    manifest = {
        "seed": dataset.seed,
        "n_scenes": len(dataset.samples),
        "split_spec": dataset.split_spec.to_dict(),
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return root


def load_dataset(directory: str) -> Dataset:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"No dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    spec = SplitSpec.from_dict(manifest["split_spec"])
    by_index: Dict[int, Sample] = {}
    for name in SPLITS:
        split_dir = root / name
        indices = spec.indices(name)
        if not indices:
            continue
        images = load_tensor(split_dir / "images.tnsr").data
        records = pd.read_json(split_dir / "records.jsonl", orient="records", lines=True)
        if len(records) != len(indices) or images.shape[0] != len(indices):
            raise FormatError(f"Split '{name}' holds {len(records)} records for {len(indices)} indices")
        for row, pixels in zip(records.itertuples(index=False), images):
            scene = Scene.from_dict(row.scene)
            qa = [
                QAPair(q, a, tokenize(q, strict=True), tokenize(a, strict=True))
                for q, a in row.qa
            ]
            by_index[int(row.index)] = Sample(
                int(row.index), scene, Image(pixels), row.caption, [int(t) for t in row.caption_ids], qa
            )
    samples = [by_index[i] for i in sorted(by_index)]
    if [s.index for s in samples] != list(range(manifest["n_scenes"])):
        raise FormatError("Dataset records do not cover every scene index")
    return Dataset(seed=int(manifest["seed"]), samples=samples, split_spec=spec)
