"""
Query transformer bridging the frozen vision encoder and the frozen LM.

The input sequence is [query tokens; grounding rows; embedded prompt]. Every
block runs self-attention over the whole sequence; blocks 0, f, 2f, ... also
let the query rows cross-attend to the image features, while grounding and
prompt rows pass through those cross-attention sublayers unchanged. Query
rows and text rows use separate feed-forward weights. Only the query rows
are returned.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import ConfigError, FormatError, ShapeError
from ..lab_configs import get_config
from ..nn.blocks import attention, embed
from ..nn.layers import AttentionParams, FeedForward, LayerNorm, Linear, TokenTable
from ..nn.module import Module
from ..tensor.core import Tensor, concat
from ..tensor.rng import Rng
from ..tensor.serialization import load_tensor, save_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "qformer.json"


@dataclass(frozen=True)
class QFormerConfig:
    num_queries: int
    model_dim: int
    num_heads: int
    ff_dim: int
    num_blocks: int
    vision_dim: int
    lm_dim: int
    vocab_size: int
    max_prompt_len: int = 64
    cross_attention_frequency: int = 2

    def __post_init__(self):
        for name in ("num_queries", "model_dim", "num_heads", "ff_dim", "num_blocks", "vision_dim", "lm_dim", "vocab_size", "max_prompt_len", "cross_attention_frequency"):
            if getattr(self, name) < 1:
                raise ConfigError(f"QFormerConfig.{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"QFormer model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")

    def has_cross_attention(self, block_index: int) -> bool:
        return block_index % self.cross_attention_frequency == 0

    @classmethod
    def from_lab_config(cls, vision_dim: int, lm_dim: int, vocab_size: int, config: Optional[dict] = None, **overrides) -> "QFormerConfig":
        config = config or get_config()
        values = dict(
            num_queries=config["num_queries"],
            model_dim=config["qformer_dim"],
            num_heads=config["qformer_heads"],
            ff_dim=config["qformer_ff_dim"],
            num_blocks=config["qformer_blocks"],
            vision_dim=vision_dim,
            lm_dim=lm_dim,
            vocab_size=vocab_size,
            max_prompt_len=config["lm_max_seq_len"],
            cross_attention_frequency=config["cross_attention_frequency"],
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


class QFormerBlock(Module):
    def __init__(self, config: QFormerConfig, rng: Rng, cross: bool):
        dim = config.model_dim
        self.ln_self = LayerNorm(dim)
        self.self_attn = AttentionParams(dim, config.num_heads, rng.spawn("self"))
        if cross:
            self.ln_cross = LayerNorm(dim)
            self.cross_attn = AttentionParams(dim, config.num_heads, rng.spawn("cross"), kv_dim=config.vision_dim)
        else:
            self.ln_cross = None
            self.cross_attn = None
        self.ln_ff_query = LayerNorm(dim)
        self.ff_query = FeedForward(dim, config.ff_dim, rng.spawn("ff_query"))
        self.ln_ff_text = LayerNorm(dim)
        self.ff_text = FeedForward(dim, config.ff_dim, rng.spawn("ff_text"))

    @property
    def has_cross_attention(self) -> bool:
        return self.cross_attn is not None

    def __call__(self, h: Tensor, num_queries: int, image_feats: Tensor) -> Tensor:
        normed = self.ln_self(h)
        h = h + attention(normed, normed, self.self_attn)
        queries, text = h[:num_queries], h[num_queries:]
        if self.cross_attn is not None:
            queries = queries + attention(self.ln_cross(queries), image_feats, self.cross_attn)
        queries = queries + self.ff_query(self.ln_ff_query(queries))
        if text.shape[0] == 0:
            return queries
        text = text + self.ff_text(self.ln_ff_text(text))
        return concat([queries, text])


class QFormerState(Module):
    """
    Every trainable object of fusion training: query tokens t_q, the QFormer's
    own prompt embeddings, its blocks, the grounding adapter (LM dim -> d_q)
    and the output projection (d_q -> LM dim).

    Args:
        config: Architecture
        rng: Initialization stream
        projection_init: "normal" or "identity" (needs d_q == LM dim)
    """

    def __init__(self, config: QFormerConfig, rng: Rng, projection_init: str = "normal"):
        self.config = config
        self.query_tokens = Tensor(rng.spawn("queries").normal((config.num_queries, config.model_dim), std=0.5), requires_grad=True, name="query_tokens")
        self.tokens = TokenTable(config.vocab_size, config.model_dim, rng.spawn("tokens"))
        self.blocks = [
            QFormerBlock(config, rng.spawn(f"block{i}"), cross=config.has_cross_attention(i))
            for i in range(config.num_blocks)
        ]
        self.final_norm = LayerNorm(config.model_dim)
        self.grounding_adapter = Linear(config.lm_dim, config.model_dim, rng.spawn("grounding"))
        self.out_projection = Linear(config.model_dim, config.lm_dim, rng.spawn("projection"), init=projection_init)


def _run_blocks(state: QFormerState, pieces: Sequence[Tensor], image_feats: Tensor) -> Tensor:
    config = state.config
    if image_feats.ndim != 2 or image_feats.shape[1] != config.vision_dim:
        raise ShapeError(f"Image features must be [m, {config.vision_dim}], got {list(image_feats.shape)}")
    h = concat(list(pieces))
    for block in state.blocks:
        h = block(h, config.num_queries, image_feats)
    return state.final_norm(h[: config.num_queries])


def _embed_prompt(state: QFormerState, prompt_ids: Sequence[int]) -> Tensor:
    return embed(prompt_ids, state.tokens, state.config.max_prompt_len)


def qformer_forward(state: QFormerState, image_feats: Tensor, prompt_ids: Sequence[int]) -> Tensor:
    """Query tokens and prompt through the blocks: [n_q, d_q] transformed query rows."""
    return _run_blocks(state, [state.query_tokens, _embed_prompt(state, prompt_ids)], image_feats)


def grounded_qformer_forward(
    state: QFormerState,
    enc_prompt_states: Tensor,
    image_feats: Tensor,
    prompt_ids: Sequence[int],
) -> Tensor:
    """
    Like qformer_forward with the adapted grounding states placed between the
    query tokens and the prompt: [n_q, d_q] grounded query rows.

    An empty grounding sequence gives exactly qformer_forward's output.
    """
    lm_dim = state.config.lm_dim
    if enc_prompt_states.ndim != 2 or enc_prompt_states.shape[1] != lm_dim:
        raise ShapeError(f"Grounding states must be [l, {lm_dim}], got {list(enc_prompt_states.shape)}")
    if enc_prompt_states.shape[0] == 0:
        return qformer_forward(state, image_feats, prompt_ids)
    grounding = state.grounding_adapter(enc_prompt_states)
    return _run_blocks(state, [state.query_tokens, grounding, _embed_prompt(state, prompt_ids)], image_feats)


def project_to_lm(state: QFormerState, t: Tensor) -> Tensor:
    """Fully connected projection into the LM width: [n_q, d_q] -> [n_q, lm_dim]."""
    if t.ndim != 2 or t.shape[1] != state.config.model_dim:
        raise ShapeError(f"Projection input must be [n, {state.config.model_dim}], got {list(t.shape)}")
    return state.out_projection(t)


def save_qformer(state: QFormerState, directory: Union[str, Path]) -> Path:
    root = Path(directory)
    tensor_dir = root / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in state.named_parameters():
        save_tensor(p, tensor_dir / f"{name}.tnsr")
        names.append(name)
    with open(root / CHECKPOINT_MANIFEST, "w") as f:
        json.dump({"config": state.config.to_dict(), "parameters": names}, f, indent=2)
    return root


def load_qformer(directory: Union[str, Path]) -> QFormerState:
    root = Path(directory)
    manifest_path = root / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"No QFormer checkpoint manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    state = QFormerState(QFormerConfig(**manifest["config"]), Rng(0))
    state.load_state_dict(
        {name: load_tensor(root / "tensors" / f"{name}.tnsr").data for name in manifest["parameters"]}
    )
    return state


def copy_qformer(state: QFormerState) -> QFormerState:
    """Independent copy with identical parameter values."""
    clone = QFormerState(state.config, Rng(0))
    clone.load_state_dict({name: np.array(data, copy=True) for name, data in state.state_dict().items()})
    return clone
