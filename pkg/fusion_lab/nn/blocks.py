"""
Transformer building blocks: embeddings, multi-head attention, pre-norm
encoder/decoder stacks with per-layer state capture, and prefix injection
for decoder-only models.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, LengthError, RangeError, ShapeError, VocabError
from ..tensor import core
from ..tensor.core import Tensor, concat, embedding, softmax
from ..tensor.rng import Rng
from .config import BlockConfig
from .layers import AttentionParams, FeedForward, LayerNorm, Linear, TokenTable
from .module import Module


@dataclass
class LayerStates:
    """
    Hidden states per layer: entry 0 is the input embedding sequence and
    entry j the output of layer j.
    """

    per_layer: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.per_layer)

    def __getitem__(self, index: int) -> Tensor:
        if not 0 <= index < len(self.per_layer):
            raise RangeError(f"Layer {index} requested, states cover layers 0..{len(self.per_layer) - 1}")
        return self.per_layer[index]

    @property
    def depth(self) -> int:
        return len(self.per_layer) - 1

    def select(self, indices: Sequence[int]) -> List[Tensor]:
        return [self[i] for i in indices]


def sinusoidal_positions(positions: Sequence[int], dim: int) -> np.ndarray:
    """Fixed sin/cos encodings; negative positions are valid."""
    pos = np.asarray(list(positions), dtype=np.float64).reshape(-1, 1)
    half = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) * 2.0 / dim))
    angles = pos * freqs
    table = np.zeros((pos.shape[0], dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table.astype(core.get_default_dtype())


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def embed(
    token_ids: Sequence[int],
    tokens: TokenTable,
    max_seq_len: int,
    start: int = 0,
) -> Tensor:
    """
    Token embedding plus sinusoidal position encoding.

    Args:
        token_ids: Ids below the table's vocab size
        tokens: Token table
        max_seq_len: Longest allowed sequence
        start: Position index of the first token
    """
    ids = [int(t) for t in token_ids]
    bad = [t for t in ids if not 0 <= t < tokens.vocab_size]
    if bad:
        raise VocabError(f"Token ids {bad} are outside the vocabulary of size {tokens.vocab_size}")
    if len(ids) > max_seq_len:
        raise LengthError(f"Sequence of length {len(ids)} exceeds max_seq_len {max_seq_len}")
    dim = tokens.table.shape[1]
    positions = Tensor(sinusoidal_positions(range(start, start + len(ids)), dim))
    return embedding(tokens.table, ids) + positions


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    length, width = x.shape
    return x.reshape(length, num_heads, width // num_heads).transpose(1, 0, 2)


def attention(
    queries_in: Tensor,
    keys_values_in: Tensor,
    params: AttentionParams,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Scaled dot-product multi-head attention with output projection.

    Self-attention passes the same sequence twice. `mask[i, j]` True means
    query i may attend to key j; masked pairs get exactly zero weight.
    """
    if queries_in.ndim != 2 or queries_in.shape[1] != params.dim:
        raise ShapeError(f"Queries must be [q, {params.dim}], got {list(queries_in.shape)}")
    if keys_values_in.ndim != 2 or keys_values_in.shape[1] != params.kv_dim:
        raise ShapeError(f"Keys/values must be [kv, {params.kv_dim}], got {list(keys_values_in.shape)}")
    q_len, kv_len = queries_in.shape[0], keys_values_in.shape[0]
    if mask is not None and tuple(mask.shape) != (q_len, kv_len):
        raise ShapeError(f"Mask shape {list(mask.shape)} does not match [{q_len}, {kv_len}]")
    if q_len == 0:
        return core.zeros((0, params.dim))
    if kv_len == 0:
        raise ContractError("Attention over an empty key sequence has no defined distribution")

    heads = params.num_heads
    q = _split_heads(params.q_proj(queries_in), heads)
    k = _split_heads(params.k_proj(keys_values_in), heads)
    v = _split_heads(params.v_proj(keys_values_in), heads)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(params.dim // heads))
    weights = softmax(scores, axis=-1, mask=mask)
    context = (weights @ v).transpose(1, 0, 2).reshape(q_len, params.dim)
    return params.out_proj(context)


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, config: BlockConfig, rng: Rng):
        self.ln_attn = LayerNorm(config.model_dim)
        self.attn = AttentionParams(config.model_dim, config.num_heads, rng.spawn("attn"))
        self.ln_ff = LayerNorm(config.model_dim)
        self.ff = FeedForward(config.model_dim, config.ff_dim, rng.spawn("ff"))

    def __call__(self, h: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        normed = self.ln_attn(h)
        h = h + attention(normed, normed, self.attn, mask)
        return h + self.ff(self.ln_ff(h))


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, config: BlockConfig, rng: Rng):
        self.ln_self = LayerNorm(config.model_dim)
        self.self_attn = AttentionParams(config.model_dim, config.num_heads, rng.spawn("self"))
        self.ln_cross = LayerNorm(config.model_dim)
        self.cross_attn = AttentionParams(config.model_dim, config.num_heads, rng.spawn("cross"))
        self.ln_ff = LayerNorm(config.model_dim)
        self.ff = FeedForward(config.model_dim, config.ff_dim, rng.spawn("ff"))

    def __call__(self, h: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        normed = self.ln_self(h)
        h = h + attention(normed, normed, self.self_attn, mask)
        h = h + attention(self.ln_cross(h), memory, self.cross_attn)
        return h + self.ff(self.ln_ff(h))


class TransformerEncoder(Module):
    """Stack of encoder layers; a final layer norm is applied when the stack is non-empty."""

    def __init__(self, config: BlockConfig, rng: Rng):
        self.config = config
        self.layers = [EncoderLayer(config, rng.spawn(f"layer{i}")) for i in range(config.num_layers)]
        self.final_norm = LayerNorm(config.model_dim) if config.num_layers > 0 else None


def encoder_forward(
    x: Tensor,
    encoder: TransformerEncoder,
    capture: bool = False,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Optional[LayerStates]]:
    """
    Run a pre-norm encoder stack over x [len, model_dim].

    Returns:
        tuple: (output, LayerStates when capture=True else None)
    """
    dim = encoder.config.model_dim
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"Encoder input must be [len, {dim}], got {list(x.shape)}")
    states = LayerStates([x]) if capture else None
    h = x
    for layer in encoder.layers:
        h = layer(h, mask)
        if states is not None:
            states.per_layer.append(h)
    out = encoder.final_norm(h) if encoder.final_norm is not None else h
    return out, states


class EncoderDecoderLM(Module):
    """Encoder-decoder language model with a shared token table."""

    kind = "encoder-decoder"

    def __init__(self, config: BlockConfig, rng: Rng):
        self.config = config
        self.tokens = TokenTable(config.vocab_size, config.model_dim, rng.spawn("tokens"))
        self.encoder = TransformerEncoder(config, rng.spawn("encoder"))
        self.decoder_layers = [DecoderLayer(config, rng.spawn(f"decoder{i}")) for i in range(config.num_layers)]
        self.decoder_norm = LayerNorm(config.model_dim)
        self.lm_head = Linear(config.model_dim, config.vocab_size, rng.spawn("head"))


class DecoderOnlyLM(Module):
    """Causal language model; prefixes can be injected before any layer."""

    kind = "decoder-only"

    def __init__(self, config: BlockConfig, rng: Rng):
        self.config = config
        self.tokens = TokenTable(config.vocab_size, config.model_dim, rng.spawn("tokens"))
        self.layers = [EncoderLayer(config, rng.spawn(f"layer{i}")) for i in range(config.num_layers)]
        self.final_norm = LayerNorm(config.model_dim)
        self.lm_head = Linear(config.model_dim, config.vocab_size, rng.spawn("head"))


def decoder_forward(prefix_ids: Sequence[int], memory: Tensor, lm: EncoderDecoderLM) -> Tensor:
    """
    Causal decoder with cross-attention over `memory`.

    Returns:
        Tensor: Logits [len(prefix_ids), vocab_size]
    """
    if len(prefix_ids) == 0:
        raise ContractError("Decoder prefix must contain at least one token")
    dim = lm.config.model_dim
    if memory.ndim != 2 or memory.shape[1] != dim:
        raise ShapeError(f"Decoder memory must be [m, {dim}], got {list(memory.shape)}")
    h = embed(prefix_ids, lm.tokens, lm.config.max_seq_len)
    mask = causal_mask(len(prefix_ids))
    for layer in lm.decoder_layers:
        h = layer(h, memory, mask)
    return lm.lm_head(lm.decoder_norm(h))


def decoder_only_forward(
    ids_or_states: Union[Sequence[int], Tensor],
    lm: DecoderOnlyLM,
    inject: Optional[Tuple[int, Tensor]] = None,
) -> Tuple[Tensor, LayerStates]:
    """
    Causal LM forward with optional prefix injection.

    Args:
        ids_or_states: Token ids (embedded with positions 0..len-1) or an
            already embedded [len, model_dim] sequence used as-is
        lm: Decoder-only model
        inject: (n, prefix_states). Before layer n runs, prefix_states are
            prepended to the hidden sequence. At n = 0 they receive position
            encodings for indices -m..-1. Text rows attend to every prefix row.

    Returns:
        tuple: (logits for the text rows only, LayerStates of the text rows)
    """
    dim = lm.config.model_dim
    if isinstance(ids_or_states, Tensor):
        if ids_or_states.ndim != 2 or ids_or_states.shape[1] != dim:
            raise ShapeError(f"States must be [len, {dim}], got {list(ids_or_states.shape)}")
        h = ids_or_states
    else:
        h = embed(ids_or_states, lm.tokens, lm.config.max_seq_len)

    depth = len(lm.layers)
    inject_at, prefix = (None, None)
    if inject is not None:
        inject_at, prefix = inject
        if not 0 <= inject_at <= depth:
            raise ContractError(f"Injection layer {inject_at} is outside 0..{depth}")
        if prefix.ndim != 2 or prefix.shape[1] != dim:
            raise ShapeError(f"Injected prefix must be [m, {dim}], got {list(prefix.shape)}")

    offset = 0
    states = LayerStates()
    for j in range(depth + 1):
        if j == inject_at:
            offset = prefix.shape[0]
            if j == 0:
                prefix = prefix + Tensor(sinusoidal_positions(range(-offset, 0), dim))
            h = concat([prefix, h])
        states.per_layer.append(h[offset:] if offset else h)
        if j < depth:
            h = lm.layers[j](h, causal_mask(h.shape[0]))
    logits = lm.lm_head(lm.final_norm(h))
    return (logits[offset:] if offset else logits), states
