"""
End-to-end fusion graphs.

    standard encoder-decoder   encoder runs on [queries, prompt]; decoder reads its output
    standard decoder-only      [prompt, queries] form the input prefix
    grounded encoder-decoder   encoder runs on the prompt alone; the QFormer reads that
                               encoding and the decoder reads [queries, encoding]
    grounded decoder-only      queries injected before decoder layer n, grounded on
                               the prompt's hidden states at layer n (experimental)

Targets are end-terminated id sequences; the decoder is teacher-forced on
[start] + target[:-1] and scored against target with cross-entropy.
Every composed sequence is described by length-tagged segments, in order.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..dataflows.tokenizer import END_ID, START_ID
from ..errors import ContractError, KindError, RangeError, VocabError
from ..frozen.bundle import FrozenBundle, LMKind, lm_decode, vision_encode
from ..frozen.image import Image
from ..nn.blocks import decoder_only_forward
from ..qformer.qformer import QFormerState, grounded_qformer_forward, project_to_lm, qformer_forward
from ..tensor.core import Tensor, concat, cross_entropy, embedding, no_grad, zeros
from .cache import EncoderCache

ImageInput = Union[Image, Tensor]


class PipelineKind(str, Enum):
    STANDARD_ENCDEC = "standard-encoder-decoder"
    STANDARD_DECONLY = "standard-decoder-only"
    GROUNDED_ENCDEC = "grounded-encoder-decoder"
    GROUNDED_DECONLY = "grounded-decoder-only"

    @property
    def grounded(self) -> bool:
        return self in (PipelineKind.GROUNDED_ENCDEC, PipelineKind.GROUNDED_DECONLY)

    @property
    def lm_kind(self) -> LMKind:
        if self in (PipelineKind.STANDARD_ENCDEC, PipelineKind.GROUNDED_ENCDEC):
            return LMKind.ENCODER_DECODER
        return LMKind.DECODER_ONLY


class ConcatOrder(str, Enum):
    """CANONICAL puts queries before the prompt (encoder-decoder) or after it (decoder-only); SWAPPED flips them."""

    CANONICAL = "canonical"
    SWAPPED = "swapped"


def pipeline_kind(variant: str, lm_kind: LMKind) -> PipelineKind:
    grounded = str(getattr(variant, "value", variant)) == "grounded"
    if LMKind(lm_kind) == LMKind.ENCODER_DECODER:
        return PipelineKind.GROUNDED_ENCDEC if grounded else PipelineKind.STANDARD_ENCDEC
    return PipelineKind.GROUNDED_DECONLY if grounded else PipelineKind.STANDARD_DECONLY


@dataclass(frozen=True)
class Segment:
    name: str
    length: int


@dataclass
class PipelineOutput:
    logits: Optional[Tensor] = None
    loss: Optional[Tensor] = None
    generated_ids: Optional[List[int]] = None
    segments: Dict[str, List[Segment]] = field(default_factory=dict)
    encoder_calls: int = 0

    def segment_names(self, sequence: str) -> List[str]:
        return [s.name for s in self.segments[sequence]]

    def sequence_length(self, sequence: str) -> int:
        return sum(s.length for s in self.segments[sequence])


def _require_kind(bundle: FrozenBundle, kind: LMKind, pipeline: str):
    if bundle.lm_kind != kind:
        raise KindError(f"{pipeline} needs a {kind.value} bundle, got {bundle.lm_kind.value}")


def image_features(bundle: FrozenBundle, image: ImageInput) -> Tensor:
    """Frozen vision features for an Image; precomputed feature tensors pass through."""
    if isinstance(image, Tensor):
        return image
    return vision_encode(bundle, image)[0]


def _decoder_input(target_ids: Optional[Sequence[int]]) -> List[int]:
    if target_ids is None:
        return [START_ID]
    if len(target_ids) == 0:
        raise ContractError("target_ids must hold at least the end token")
    return [START_ID] + list(target_ids[:-1])


def _token_rows(bundle: FrozenBundle, ids: Sequence[int]) -> Tensor:
    """LM token embeddings without position encodings."""
    vocab = bundle.lm.config.vocab_size
    bad = [t for t in ids if not 0 <= int(t) < vocab]
    if bad:
        raise VocabError(f"Token ids {bad} are outside the vocabulary of size {vocab}")
    return embedding(bundle.lm.tokens.table, ids)


def _scored(logits: Tensor, target_ids: Optional[Sequence[int]]) -> Optional[Tensor]:
    return cross_entropy(logits, list(target_ids)) if target_ids is not None else None


# ----------------------------------------------------------------------
# conditioning sequences
# ----------------------------------------------------------------------
def _standard_encdec_memory(bundle, qf, feats, prompt_ids, cache: EncoderCache, order: ConcatOrder):
    projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids))
    queries = Segment("queries", projected.shape[0])
    prompt = Segment("prompt", len(prompt_ids))
    if ConcatOrder(order) == ConcatOrder.CANONICAL:
        memory = cache.encode_uncached(prompt_ids, projected, placement="before")
        layout = [queries, prompt]
    else:
        memory = cache.encode_uncached(prompt_ids, projected, placement="after")
        layout = [prompt, queries]
    return memory, {"encoder_input": layout, "decoder_memory": [Segment("encoder_output", memory.shape[0])]}


def _grounded_encdec_memory(bundle, qf, feats, prompt_ids, cache: EncoderCache, force_empty_grounding: bool):
    encoded = cache.encode(prompt_ids)
    grounding = zeros((0, encoded.shape[1])) if force_empty_grounding else encoded
    grounded = project_to_lm(qf, grounded_qformer_forward(qf, grounding, feats, prompt_ids))
    memory = concat([grounded, encoded])
    layout = [Segment("grounded_queries", grounded.shape[0]), Segment("encoder_prompt", encoded.shape[0])]
    return memory, {"decoder_memory": layout}


def _standard_deconly_prefix(bundle, qf, feats, prompt_ids, order: ConcatOrder):
    projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids))
    prompt_rows = _token_rows(bundle, prompt_ids)
    if ConcatOrder(order) == ConcatOrder.CANONICAL:
        prefix = concat([prompt_rows, projected])
        layout = [Segment("prompt", len(prompt_ids)), Segment("queries", projected.shape[0])]
    else:
        prefix = concat([projected, prompt_rows])
        layout = [Segment("queries", projected.shape[0]), Segment("prompt", len(prompt_ids))]
    return prefix, layout


def _grounded_deconly_prefix(bundle, qf, feats, prompt_ids, layer_n: int, cache: EncoderCache, force_empty_grounding: bool):
    depth = bundle.lm_depth
    if not 0 <= layer_n <= depth:
        raise RangeError(f"Injection layer {layer_n} is outside 0..{depth}")
    grounding = cache.layer_states(prompt_ids, layer_n)
    if force_empty_grounding:
        grounding = zeros((0, grounding.shape[1]))
    return project_to_lm(qf, grounded_qformer_forward(qf, grounding, feats, prompt_ids))


# ----------------------------------------------------------------------
# forwards
# ----------------------------------------------------------------------
def standard_encdec_forward(
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    target_ids: Optional[Sequence[int]] = None,
    cache: Optional[EncoderCache] = None,
    order: ConcatOrder = ConcatOrder.CANONICAL,
) -> PipelineOutput:
    """Queries and prompt go through the encoder together, so it runs on every call since its input carries the queries."""
    _require_kind(bundle, LMKind.ENCODER_DECODER, "standard_encdec_forward")
    cache = cache if cache is not None else EncoderCache(bundle, enabled=False)
    before = cache.encoder_calls
    feats = image_features(bundle, image)
    memory, segments = _standard_encdec_memory(bundle, qf, feats, prompt_ids, cache, order)
    decoder_ids = _decoder_input(target_ids)
    logits = lm_decode(bundle, memory, decoder_ids)
    segments["decoder_input"] = [Segment("target", len(decoder_ids))]
    return PipelineOutput(logits, _scored(logits, target_ids), None, segments, cache.encoder_calls - before)


def standard_deconly_forward(
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    target_ids: Optional[Sequence[int]] = None,
    order: ConcatOrder = ConcatOrder.CANONICAL,
) -> PipelineOutput:
    """Prompt and projected queries form the input-level prefix."""
    _require_kind(bundle, LMKind.DECODER_ONLY, "standard_deconly_forward")
    feats = image_features(bundle, image)
    prefix, layout = _standard_deconly_prefix(bundle, qf, feats, prompt_ids, order)
    decoder_ids = _decoder_input(target_ids)
    logits, _ = decoder_only_forward(decoder_ids, bundle.lm, inject=(0, prefix))
    segments = {"decoder_input": layout + [Segment("target", len(decoder_ids))]}
    return PipelineOutput(logits, _scored(logits, target_ids), None, segments, 0)


def grounded_encdec_forward(
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    target_ids: Optional[Sequence[int]] = None,
    cache: Optional[EncoderCache] = None,
    force_empty_grounding: bool = False,
) -> PipelineOutput:
    """
    The encoder only ever sees the prompt, so its output
    comes from `cache` after the first call per prompt.

    Args:
        force_empty_grounding: Feed the QFormer an empty grounding sequence
            (the decoder still receives the prompt encoding)
    """
    _require_kind(bundle, LMKind.ENCODER_DECODER, "grounded_encdec_forward")
    cache = cache if cache is not None else EncoderCache(bundle)
    before = cache.encoder_calls
    feats = image_features(bundle, image)
    memory, segments = _grounded_encdec_memory(bundle, qf, feats, prompt_ids, cache, force_empty_grounding)
    decoder_ids = _decoder_input(target_ids)
    logits = lm_decode(bundle, memory, decoder_ids)
    segments["decoder_input"] = [Segment("target", len(decoder_ids))]
    return PipelineOutput(logits, _scored(logits, target_ids), None, segments, cache.encoder_calls - before)


def grounded_deconly_forward(
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    target_ids: Optional[Sequence[int]] = None,
    layer_n: int = 0,
    cache: Optional[EncoderCache] = None,
    force_empty_grounding: bool = False,
) -> PipelineOutput:
    """
    Grounded queries injected before decoder layer `layer_n`; the decoder reads
    prompt + [start] + target[:-1] and only the target rows are scored.
    """
    _require_kind(bundle, LMKind.DECODER_ONLY, "grounded_deconly_forward")
    cache = cache if cache is not None else EncoderCache(bundle)
    before = cache.encoder_calls
    feats = image_features(bundle, image)
    prefix = _grounded_deconly_prefix(bundle, qf, feats, prompt_ids, layer_n, cache, force_empty_grounding)
    decoder_ids = _decoder_input(target_ids)
    logits, _ = decoder_only_forward(list(prompt_ids) + decoder_ids, bundle.lm, inject=(layer_n, prefix))
    logits = logits[len(prompt_ids):]
    segments = {
        "decoder_input": [
            Segment("grounded_queries", prefix.shape[0]),
            Segment("prompt", len(prompt_ids)),
            Segment("target", len(decoder_ids)),
        ]
    }
    return PipelineOutput(logits, _scored(logits, target_ids), None, segments, cache.encoder_calls - before)


def run_pipeline(
    kind: PipelineKind,
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    target_ids: Optional[Sequence[int]] = None,
    cache: Optional[EncoderCache] = None,
    layer_n: int = 0,
    force_empty_grounding: bool = False,
    order: ConcatOrder = ConcatOrder.CANONICAL,
) -> PipelineOutput:
    """Dispatch to the forward of `kind`."""
    kind = PipelineKind(kind)
    if kind == PipelineKind.STANDARD_ENCDEC:
        return standard_encdec_forward(bundle, qf, image, prompt_ids, target_ids, cache, order)
    if kind == PipelineKind.STANDARD_DECONLY:
        return standard_deconly_forward(bundle, qf, image, prompt_ids, target_ids, order)
    if kind == PipelineKind.GROUNDED_ENCDEC:
        return grounded_encdec_forward(bundle, qf, image, prompt_ids, target_ids, cache, force_empty_grounding)
    return grounded_deconly_forward(bundle, qf, image, prompt_ids, target_ids, layer_n, cache, force_empty_grounding)


def generate(
    kind: PipelineKind,
    bundle: FrozenBundle,
    qf: QFormerState,
    image: ImageInput,
    prompt_ids: Sequence[int],
    max_len: int,
    cache: Optional[EncoderCache] = None,
    layer_n: int = 0,
    force_empty_grounding: bool = False,
    order: ConcatOrder = ConcatOrder.CANONICAL,
) -> PipelineOutput:
    """
    Greedy decoding from the start token until the end token (kept in the
    output) or max_len tokens. The conditioning sequence is built once per
    call; grounded kinds take the encoder output from `cache`.
    """
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    kind = PipelineKind(kind)
    _require_kind(bundle, kind.lm_kind, f"generate({kind.value})")
    cache = cache if cache is not None else EncoderCache(bundle, enabled=kind.grounded)
    before = cache.encoder_calls
    generated: List[int] = []
    with no_grad():
        feats = image_features(bundle, image)
        if kind == PipelineKind.STANDARD_ENCDEC:
            memory, _ = _standard_encdec_memory(bundle, qf, feats, prompt_ids, cache, order)
        elif kind == PipelineKind.GROUNDED_ENCDEC:
            memory, _ = _grounded_encdec_memory(bundle, qf, feats, prompt_ids, cache, force_empty_grounding)
        elif kind == PipelineKind.STANDARD_DECONLY:
            prefix, _ = _standard_deconly_prefix(bundle, qf, feats, prompt_ids, order)
        else:
            prefix = _grounded_deconly_prefix(bundle, qf, feats, prompt_ids, layer_n, cache, force_empty_grounding)

        while len(generated) < max_len:
            decoder_ids = [START_ID] + generated
            if kind.lm_kind == LMKind.ENCODER_DECODER:
                logits = lm_decode(bundle, memory, decoder_ids)
            elif kind == PipelineKind.STANDARD_DECONLY:
                logits, _ = decoder_only_forward(decoder_ids, bundle.lm, inject=(0, prefix))
            else:
                logits, _ = decoder_only_forward(list(prompt_ids) + decoder_ids, bundle.lm, inject=(layer_n, prefix))
            next_id = int(np.argmax(logits.data[-1]))
            generated.append(next_id)
            if next_id == END_ID:
                break
    return PipelineOutput(generated_ids=generated, encoder_calls=cache.encoder_calls - before)
