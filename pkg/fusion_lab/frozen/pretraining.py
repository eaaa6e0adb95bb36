"""
Fixed pretraining recipes run once before the toy models are frozen.

Vision: shape/color/count classification of rendered scenes (heads are
discarded afterwards). Encoder-decoder LM: caption denoising plus
question-to-answer. Decoder-only LM: next-token prediction on the same text.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from ..dataflows.tokenizer import END_ID, START_ID, UNK_ID
from ..dataflows.world import Sample, make_sample
from ..errors import TrainingError
from ..lab_configs import get_config
from ..nn.blocks import DecoderOnlyLM, EncoderDecoderLM, decoder_forward, decoder_only_forward, embed, encoder_forward
from ..nn.layers import Linear
from ..nn.module import Module
from ..nn.optim import AdamW
from ..tensor.core import Tensor, backward, cross_entropy, no_grad
from ..tensor.rng import Rng
from .vision import VisionEncoder, vision_forward

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle")
COLOR_CLASSES = ("red", "green", "blue", "yellow")


@dataclass(frozen=True)
class PretrainRecipe:
    recipe_id: str
    steps: int
    lr: float
    batch_size: int
    n_scenes: int
    heldout_scenes: int
    mask_rate: float
    divergence_loss: float

    @classmethod
    def from_lab_config(cls, config: Optional[dict] = None, **overrides) -> "PretrainRecipe":
        config = config or get_config()
        values = dict(
            recipe_id=config["recipe_id"],
            steps=config["recipe_steps"],
            lr=config["recipe_lr"],
            batch_size=config["recipe_batch_size"],
            n_scenes=config["recipe_scenes"],
            heldout_scenes=config["recipe_heldout_scenes"],
            mask_rate=config["recipe_mask_rate"],
            divergence_loss=config["recipe_divergence_loss"],
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


class _VisionHeads(Module):
    def __init__(self, dim: int, rng: Rng):
        self.shape = Linear(dim, len(SHAPE_CLASSES), rng.spawn("shape"))
        self.color = Linear(dim, len(COLOR_CLASSES), rng.spawn("color"))
        self.count = Linear(dim, 3, rng.spawn("count"))


def _vision_loss(vision: VisionEncoder, heads: _VisionHeads, sample: Sample) -> Tensor:
    features, _ = vision_forward(vision, sample.image)
    aggregate = features[0:1]
    first = sample.scene.objects[0]
    return (
        cross_entropy(heads.shape(aggregate), [SHAPE_CLASSES.index(first.shape)])
        + cross_entropy(heads.color(aggregate), [COLOR_CLASSES.index(first.color)])
        + cross_entropy(heads.count(aggregate), [len(sample.scene.objects) - 1])
    )


def _mask_tokens(ids: List[int], rate: float, rng: Rng) -> List[int]:
    return [UNK_ID if rng.random() < rate else t for t in ids]


def _encdec_loss(lm: EncoderDecoderLM, sample: Sample, rng: Rng, mask_rate: float) -> Tensor:
    max_len = lm.config.max_seq_len
    corrupted = _mask_tokens(sample.caption_ids, mask_rate, rng)
    memory, _ = encoder_forward(embed(corrupted, lm.tokens, max_len), lm.encoder)
    logits = decoder_forward([START_ID] + sample.caption_ids, memory, lm)
    loss = cross_entropy(logits, sample.caption_ids + [END_ID])
    for pair in sample.qa:
        memory, _ = encoder_forward(embed(pair.question_ids, lm.tokens, max_len), lm.encoder)
        logits = decoder_forward([START_ID] + pair.answer_ids, memory, lm)
        loss = loss + cross_entropy(logits, pair.answer_ids + [END_ID])
    return loss * (1.0 / (1 + len(sample.qa)))


def _deconly_loss(lm: DecoderOnlyLM, sample: Sample, rng: Rng, mask_rate: float) -> Tensor:
    sequences = [[START_ID] + sample.caption_ids + [END_ID]]
    sequences += [pair.question_ids + [START_ID] + pair.answer_ids + [END_ID] for pair in sample.qa]
    loss = None
    for seq in sequences:
        logits, _ = decoder_only_forward(seq[:-1], lm)
        term = cross_entropy(logits, seq[1:])
        loss = term if loss is None else loss + term
    return loss * (1.0 / len(sequences))


def _run_recipe(
    name: str,
    params: List[Tensor],
    loss_fn: Callable[[Sample, Rng], Tensor],
    train: List[Sample],
    heldout: List[Sample],
    recipe: PretrainRecipe,
    rng: Rng,
) -> float:
    optimizer = AdamW(params, lr=recipe.lr, weight_decay=0.0)
    draws = rng.spawn("batches")
    for step in range(recipe.steps):
        optimizer.zero_grad()
        batch = [train[int(i)] for i in draws.integers(0, len(train), size=recipe.batch_size)]
        total = 0.0
        for sample in batch:
            loss = loss_fn(sample, rng) * (1.0 / len(batch))
            value = loss.item()
            if not np.isfinite(value) or value * len(batch) > recipe.divergence_loss:
                raise TrainingError(f"{name} pretraining diverged with loss {value * len(batch):.4g}", step=step)
            total += value
            backward(loss)
        optimizer.step()
        if step % 25 == 0 or step == recipe.steps - 1:
            logger.debug("%s pretraining step %d loss %.4f", name, step, total)

    with no_grad():
        losses = [loss_fn(sample, rng.spawn("heldout")).item() for sample in heldout]
    heldout_loss = float(np.mean(losses)) if losses else float("nan")
    logger.info("%s pretraining done, held-out loss %.4f", name, heldout_loss)
    return heldout_loss


def pretraining_samples(seed: int, recipe: PretrainRecipe):
    """Recipe scenes: indices [0, n_scenes) train, the next heldout_scenes are held out."""
    data_seed = Rng(seed).spawn("pretrain-data").seed
    train = [make_sample(i, data_seed) for i in range(recipe.n_scenes)]
    heldout = [make_sample(recipe.n_scenes + i, data_seed) for i in range(recipe.heldout_scenes)]
    return train, heldout


def pretrain_vision(vision: VisionEncoder, recipe: PretrainRecipe, train, heldout, rng: Rng) -> float:
    heads = _VisionHeads(vision.config.model_dim, rng.spawn("heads"))
    params = vision.parameters() + heads.parameters()
    return _run_recipe(
        "vision", params, lambda sample, _rng: _vision_loss(vision, heads, sample), train, heldout, recipe, rng
    )


def pretrain_lm(lm, recipe: PretrainRecipe, train, heldout, rng: Rng) -> float:
    loss_fn = _encdec_loss if isinstance(lm, EncoderDecoderLM) else _deconly_loss
    mask_rng = rng.spawn("mask")
    return _run_recipe(
        lm.kind,
        lm.parameters(),
        lambda sample, _rng: loss_fn(lm, sample, mask_rng, recipe.mask_rate),
        train,
        heldout,
        recipe,
        rng,
    )


def run_pretraining(vision: VisionEncoder, lm, seed: int, recipe: PretrainRecipe) -> Dict[str, float]:
    rng = Rng(seed).spawn(f"pretrain:{recipe.recipe_id}")
    train, heldout = pretraining_samples(seed, recipe)
    return {
        "vision": pretrain_vision(vision, recipe, train, heldout, rng.spawn("vision")),
        "lm": pretrain_lm(lm, recipe, train, heldout, rng.spawn("lm")),
    }
