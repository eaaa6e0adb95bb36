"""
Shared fixtures: tiny 64-bit frozen bundles, a small synthetic world and
factories for QFormer states and run configs.
"""

import pytest

from fusion_lab.dataflows.tokenizer import get_tokenizer
from fusion_lab.dataflows.world import gen_dataset
from fusion_lab.frozen.bundle import FrozenConfig, LMKind, build_frozen_bundle
from fusion_lab.frozen.pretraining import PretrainRecipe
from fusion_lab.harness.run_config import parse_run_config
from fusion_lab.nn.config import BlockConfig
from fusion_lab.qformer.qformer import QFormerConfig, QFormerState
from fusion_lab.tensor.core import precision
from fusion_lab.tensor.rng import Rng

TINY_DIM = 16
TINY_QFORMER = {
    "num_queries": 2,
    "model_dim": 8,
    "num_heads": 2,
    "ff_dim": 16,
    "num_blocks": 2,
    "cross_attention_frequency": 2,
}


def tiny_frozen_config(lm_kind: LMKind) -> FrozenConfig:
    vision = BlockConfig(model_dim=TINY_DIM, num_heads=2, ff_dim=32, num_layers=2, max_seq_len=17, vocab_size=1)
    lm = BlockConfig(
        model_dim=TINY_DIM, num_heads=2, ff_dim=32, num_layers=3, max_seq_len=64, vocab_size=get_tokenizer().vocab_size
    )
    return FrozenConfig(image_size=32, patch_size=8, vision=vision, lm_kind=lm_kind, lm=lm)


def tiny_recipe() -> PretrainRecipe:
    return PretrainRecipe.from_lab_config(steps=2, batch_size=2, n_scenes=12, heldout_scenes=2)


def _build(lm_kind: LMKind):
    with precision("float64"):
        return build_frozen_bundle(7, tiny_frozen_config(lm_kind), tiny_recipe())


@pytest.fixture(scope="session")
def encdec_bundle():
    """Pretrained, frozen encoder-decoder bundle with 64-bit weights."""
    return _build(LMKind.ENCODER_DECODER)


@pytest.fixture(scope="session")
def deconly_bundle():
    """Pretrained, frozen decoder-only bundle with 64-bit weights."""
    return _build(LMKind.DECODER_ONLY)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_dataset(3, 40)


@pytest.fixture
def make_qformer():
    """Factory for small 64-bit QFormer states matching a bundle."""

    def factory(bundle, seed: int = 0, **overrides):
        values = dict(
            TINY_QFORMER,
            vision_dim=bundle.config.vision.model_dim,
            lm_dim=bundle.config.lm.model_dim,
            vocab_size=bundle.config.lm.vocab_size,
            max_prompt_len=bundle.config.lm.max_seq_len,
        )
        projection_init = overrides.pop("projection_init", "normal")
        values.update(overrides)
        with precision("float64"):
            return QFormerState(QFormerConfig(**values), Rng(seed), projection_init=projection_init)

    return factory


@pytest.fixture
def make_run_config(tmp_path):
    """Factory for validated RunConfigs sized for the tiny fixtures."""

    def factory(kind: str, **overrides):
        data = {
            "kind": kind,
            "seed": 3,
            "lm_kind": "encoder-decoder",
            "n_scenes": 40,
            "qformer": dict(TINY_QFORMER),
            "phases": {"single_task_epochs": 1, "caption_epochs": 1, "multitask_epochs": 1},
            "batch_size": 8,
            "max_eval_samples": 2,
            "max_generate_len": 4,
            "analysis_samples": 12,
            "knn_k": 3,
            "probe_epochs": 5,
            "output_dir": str(tmp_path / "runs"),
        }
        data.update(overrides)
        return parse_run_config(data)

    return factory
