"""
Tests for the four fusion pipelines, the encoder cache and greedy generation
"""

import numpy as np
import pytest

from fusion_lab.dataflows.captions import caption_prompt
from fusion_lab.dataflows.tokenizer import END_ID, terminated, tokenize
from fusion_lab.errors import ContractError, KindError, RangeError
from fusion_lab.frozen.bundle import lm_encode
from fusion_lab.pipelines.cache import EncoderCache
from fusion_lab.pipelines.fusion import (
    ConcatOrder,
    PipelineKind,
    generate,
    grounded_deconly_forward,
    grounded_encdec_forward,
    image_features,
    run_pipeline,
    standard_deconly_forward,
    standard_encdec_forward,
)
from fusion_lab.tensor.core import backward
from fusion_lab.tensor.gradcheck import grad_check

PROMPT = tokenize(caption_prompt(0), strict=True)


@pytest.fixture
def sample(tiny_dataset):
    return tiny_dataset.samples[0]


@pytest.fixture
def target(sample):
    return terminated(sample.caption_ids)


class TestSegments:
    """Composed sequence layouts"""

    def test_standard_encoder_decoder(self, encdec_bundle, make_qformer, sample, target):
        out = standard_encdec_forward(encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, target)
        assert out.segment_names("encoder_input") == ["queries", "prompt"]
        assert out.sequence_length("encoder_input") == 2 + len(PROMPT)
        assert out.segment_names("decoder_memory") == ["encoder_output"]
        assert out.sequence_length("decoder_memory") == 2 + len(PROMPT)
        assert out.segment_names("decoder_input") == ["target"]
        assert out.logits.shape == (len(target), encdec_bundle.config.lm.vocab_size)

    def test_swapped_order(self, encdec_bundle, make_qformer, sample, target):
        qf = make_qformer(encdec_bundle)
        out = standard_encdec_forward(encdec_bundle, qf, sample.image, PROMPT, target, order=ConcatOrder.SWAPPED)
        assert out.segment_names("encoder_input") == ["prompt", "queries"]

    def test_grounded_encoder_decoder(self, encdec_bundle, make_qformer, sample, target):
        out = grounded_encdec_forward(encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, target)
        assert out.segment_names("decoder_memory") == ["grounded_queries", "encoder_prompt"]
        assert out.sequence_length("decoder_memory") == 2 + len(PROMPT)
        assert "encoder_input" not in out.segments

    def test_standard_decoder_only(self, deconly_bundle, make_qformer, sample, target):
        out = standard_deconly_forward(deconly_bundle, make_qformer(deconly_bundle), sample.image, PROMPT, target)
        assert out.segment_names("decoder_input") == ["prompt", "queries", "target"]
        assert out.sequence_length("decoder_input") == len(PROMPT) + 2 + len(target)
        assert out.logits.shape[0] == len(target)
        assert out.encoder_calls == 0

    def test_grounded_decoder_only(self, deconly_bundle, make_qformer, sample, target):
        qf = make_qformer(deconly_bundle)
        out = grounded_deconly_forward(deconly_bundle, qf, sample.image, PROMPT, target, layer_n=deconly_bundle.lm_depth)
        assert out.segment_names("decoder_input") == ["grounded_queries", "prompt", "target"]
        assert out.logits.shape[0] == len(target)
        assert np.isfinite(out.loss.item())


class TestEncoderCache:
    """Encoder invocation accounting"""

    def test_same_prompt_twice_is_one_call(self, encdec_bundle, make_qformer, sample, target):
        qf = make_qformer(encdec_bundle)
        cache = EncoderCache(encdec_bundle)
        first = grounded_encdec_forward(encdec_bundle, qf, sample.image, PROMPT, target, cache)
        second = grounded_encdec_forward(encdec_bundle, qf, sample.image, PROMPT, target, cache)
        assert (first.encoder_calls, second.encoder_calls) == (1, 0)
        assert cache.counters() == {"encoder_calls": 1, "cache_hits": 1, "cache_misses": 1}

    def test_calls_scale_with_prompts_not_samples(self, encdec_bundle, make_qformer, tiny_dataset):
        qf = make_qformer(encdec_bundle)
        prompts = [tokenize(caption_prompt(i % 3), strict=True) for i in range(10)]
        grounded, standard = EncoderCache(encdec_bundle), EncoderCache(encdec_bundle)
        for sample, prompt in zip(tiny_dataset.samples, prompts):
            feats = image_features(encdec_bundle, sample.image)
            grounded_encdec_forward(encdec_bundle, qf, feats, prompt, cache=grounded)
            standard_encdec_forward(encdec_bundle, qf, feats, prompt, cache=standard)
        assert grounded.encoder_calls == 3
        assert len(grounded) == 3
        assert standard.encoder_calls == 10
        assert len(standard) == 0

    def test_cached_output_equals_fresh_encoding(self, encdec_bundle):
        cache = EncoderCache(encdec_bundle)
        cache.encode(PROMPT)
        cached = cache.encode(PROMPT)
        fresh, _ = lm_encode(encdec_bundle, PROMPT)
        assert np.array_equal(cached.data, fresh.data)

    def test_disabled_cache_recomputes(self, encdec_bundle):
        cache = EncoderCache(encdec_bundle, enabled=False)
        cache.encode(PROMPT)
        cache.encode(PROMPT)
        assert cache.encoder_calls == 2
        assert cache.cache_hits == 0

    def test_clear_keeps_counters(self, encdec_bundle):
        cache = EncoderCache(encdec_bundle)
        cache.encode(PROMPT)
        cache.clear()
        assert len(cache) == 0
        cache.encode(PROMPT)
        cache.encode(PROMPT)
        assert cache.counters() == {"encoder_calls": 2, "cache_hits": 1, "cache_misses": 2}

    def test_decoder_only_layer_states_are_cached_per_layer(self, deconly_bundle):
        cache = EncoderCache(deconly_bundle)
        cache.layer_states(PROMPT, 1)
        cache.layer_states(PROMPT, 1)
        cache.layer_states(PROMPT, 2)
        assert (cache.cache_hits, cache.cache_misses) == (1, 2)


class TestGeneration:
    """Greedy decoding"""

    def test_single_token(self, encdec_bundle, make_qformer, sample):
        out = generate(PipelineKind.GROUNDED_ENCDEC, encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, 1)
        assert len(out.generated_ids) == 1

    def test_stops_at_end_or_limit(self, deconly_bundle, make_qformer, sample):
        qf = make_qformer(deconly_bundle)
        ids = generate(PipelineKind.STANDARD_DECONLY, deconly_bundle, qf, sample.image, PROMPT, 5).generated_ids
        assert 1 <= len(ids) <= 5
        assert END_ID not in ids[:-1]

    @pytest.mark.parametrize("kind", [PipelineKind.STANDARD_ENCDEC, PipelineKind.GROUNDED_ENCDEC])
    def test_deterministic(self, kind, encdec_bundle, make_qformer, sample):
        qf = make_qformer(encdec_bundle)
        first = generate(kind, encdec_bundle, qf, sample.image, PROMPT, 4)
        second = generate(kind, encdec_bundle, qf, sample.image, PROMPT, 4)
        assert first.generated_ids == second.generated_ids

    def test_cached_grounded_generation_skips_encoder(self, encdec_bundle, make_qformer, sample):
        qf = make_qformer(encdec_bundle)
        cache = EncoderCache(encdec_bundle)
        first = generate(PipelineKind.GROUNDED_ENCDEC, encdec_bundle, qf, sample.image, PROMPT, 4, cache=cache)
        second = generate(PipelineKind.GROUNDED_ENCDEC, encdec_bundle, qf, sample.image, PROMPT, 4, cache=cache)
        assert (first.encoder_calls, second.encoder_calls) == (1, 0)

    def test_standard_generation_encodes_once_per_call(self, encdec_bundle, make_qformer, sample):
        qf = make_qformer(encdec_bundle)
        out = generate(PipelineKind.STANDARD_ENCDEC, encdec_bundle, qf, sample.image, PROMPT, 4)
        assert out.encoder_calls == 1

    def test_max_len_must_be_positive(self, encdec_bundle, make_qformer, sample):
        with pytest.raises(ContractError):
            generate(PipelineKind.STANDARD_ENCDEC, encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, 0)


class TestPipelineErrors:
    """Kind and range checks"""

    def test_kind_mismatch(self, deconly_bundle, encdec_bundle, make_qformer, sample):
        with pytest.raises(KindError):
            standard_encdec_forward(deconly_bundle, make_qformer(deconly_bundle), sample.image, PROMPT)
        with pytest.raises(KindError):
            generate(PipelineKind.GROUNDED_DECONLY, encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, 2)

    def test_injection_layer_range(self, deconly_bundle, make_qformer, sample):
        qf = make_qformer(deconly_bundle)
        with pytest.raises(RangeError):
            grounded_deconly_forward(deconly_bundle, qf, sample.image, PROMPT, layer_n=deconly_bundle.lm_depth + 1)

    def test_empty_target(self, encdec_bundle, make_qformer, sample):
        with pytest.raises(ContractError):
            run_pipeline(PipelineKind.GROUNDED_ENCDEC, encdec_bundle, make_qformer(encdec_bundle), sample.image, PROMPT, [])


class TestPipelineGradients:
    """End-to-end gradients reach only the trainable state"""

    @pytest.mark.parametrize("kind", [PipelineKind.STANDARD_ENCDEC, PipelineKind.GROUNDED_ENCDEC])
    def test_grad_check(self, kind, encdec_bundle, make_qformer, sample, target):
        qf = make_qformer(encdec_bundle)
        feats = image_features(encdec_bundle, sample.image)
        params = [qf.query_tokens, qf.out_projection.weight, qf.grounding_adapter.weight]

        def loss():
            return run_pipeline(kind, encdec_bundle, qf, feats, PROMPT, target).loss

        assert grad_check(loss, params) < 1e-4

    def test_grounded_decoder_only_grad_check(self, deconly_bundle, make_qformer, sample, target):
        qf = make_qformer(deconly_bundle)
        feats = image_features(deconly_bundle, sample.image)
        params = [qf.query_tokens, qf.out_projection.weight, qf.grounding_adapter.weight]

        def loss():
            return grounded_deconly_forward(deconly_bundle, qf, feats, PROMPT, target, layer_n=1).loss

        assert grad_check(loss, params) < 1e-4

    def test_backward_leaves_frozen_bundle_untouched(self, encdec_bundle, make_qformer, sample, target):
        qf = make_qformer(encdec_bundle)
        out = grounded_encdec_forward(encdec_bundle, qf, sample.image, PROMPT, target)
        backward(out.loss)
        assert qf.query_tokens.grad is not None
        assert all(p.grad is None for p in encdec_bundle.parameters())
        assert encdec_bundle.current_fingerprint() == encdec_bundle.fingerprint

    def test_empty_grounding_ignores_encoder_states_in_qformer(self, encdec_bundle, make_qformer, sample, target):
        qf = make_qformer(encdec_bundle)
        out = grounded_encdec_forward(encdec_bundle, qf, sample.image, PROMPT, target, force_empty_grounding=True)
        backward(out.loss)
        assert qf.grounding_adapter.weight.grad is None
