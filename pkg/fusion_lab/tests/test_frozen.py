"""
Tests for the frozen vision encoder + language model bundle
"""

import numpy as np
import pytest

from fusion_lab.errors import FormatError, KindError, ShapeError
from fusion_lab.frozen.bundle import (
    LMKind,
    lm_aggregate,
    lm_decode,
    lm_encode,
    lm_layer_states,
    load_bundle,
    save_bundle,
    vision_aggregate,
    vision_encode,
)
from fusion_lab.frozen.image import Image
from fusion_lab.frozen.vision import patchify
from fusion_lab.nn.blocks import embed
from fusion_lab.tensor.core import Tensor
from fusion_lab.tensor.serialization import load_tensor, save_tensor


class TestVision:
    """Frozen vision encoder"""

    def test_feature_shape(self, encdec_bundle, tiny_dataset):
        features, states = vision_encode(encdec_bundle, tiny_dataset.samples[0].image)
        assert features.shape == (17, 16)
        assert len(states) == encdec_bundle.vision_depth + 1
        assert vision_aggregate(features).shape == (16,)

    def test_wrong_image_size(self, encdec_bundle):
        with pytest.raises(ShapeError):
            vision_encode(encdec_bundle, Image(np.zeros((3, 16, 16))))

    def test_patchify_layout(self):
        pixels = np.arange(3 * 4 * 4, dtype=np.float64).reshape(3, 4, 4)
        patches = patchify(pixels, 2)
        assert patches.shape == (4, 12)

    def test_features_are_deterministic(self, encdec_bundle, tiny_dataset):
        image = tiny_dataset.samples[1].image
        first, _ = vision_encode(encdec_bundle, image)
        second, _ = vision_encode(encdec_bundle, image)
        assert np.array_equal(first.data, second.data)


class TestLanguageModel:
    """Frozen LM entry points"""

    def test_encode_shapes(self, encdec_bundle):
        out, states = lm_encode(encdec_bundle, [4, 5, 6])
        assert out.shape == (3, 16)
        assert len(states) == encdec_bundle.lm_depth + 1

    def test_layer_zero_is_the_embedding(self, encdec_bundle):
        states = lm_layer_states(encdec_bundle, [4, 5, 6])
        expected = embed([4, 5, 6], encdec_bundle.lm.tokens, encdec_bundle.config.lm.max_seq_len)
        assert np.array_equal(states[0].data, expected.data)

    def test_extra_rows_before_and_after(self, encdec_bundle):
        extra = Tensor(np.ones((2, 16)))
        before, _ = lm_encode(encdec_bundle, [4, 5, 6], extra, placement="before")
        after, _ = lm_encode(encdec_bundle, [4, 5, 6], extra, placement="after")
        assert before.shape == after.shape == (5, 16)
        assert not np.allclose(before.data, after.data)

    def test_decode_logits(self, encdec_bundle):
        memory, _ = lm_encode(encdec_bundle, [4, 5])
        logits = lm_decode(encdec_bundle, memory, [1, 7])
        assert logits.shape == (2, encdec_bundle.config.lm.vocab_size)

    def test_encoder_calls_on_decoder_only_bundle(self, deconly_bundle):
        with pytest.raises(KindError):
            lm_encode(deconly_bundle, [4, 5])
        with pytest.raises(KindError):
            lm_decode(deconly_bundle, Tensor(np.zeros((1, 16))), [1])

    def test_decoder_only_layer_states(self, deconly_bundle):
        states = lm_layer_states(deconly_bundle, [4, 5, 6])
        assert deconly_bundle.lm_kind == LMKind.DECODER_ONLY
        assert len(states) == deconly_bundle.lm_depth + 1
        assert lm_aggregate(states[2]).shape == (16,)


class TestFreezing:
    """Fingerprints and immutability"""

    def test_parameters_do_not_require_grad(self, encdec_bundle):
        assert not any(p.requires_grad for p in encdec_bundle.parameters())

    def test_parameters_are_read_only(self, encdec_bundle):
        with pytest.raises(ValueError):
            encdec_bundle.parameters()[0].data[...] = 0.0

    def test_fingerprint_matches_recomputation(self, encdec_bundle):
        assert encdec_bundle.current_fingerprint() == encdec_bundle.fingerprint

    def test_bundles_differ_by_kind(self, encdec_bundle, deconly_bundle):
        assert encdec_bundle.fingerprint != deconly_bundle.fingerprint

    def test_pretraining_reports_heldout_losses(self, encdec_bundle):
        assert set(encdec_bundle.heldout_losses) == {"vision", "lm"}
        assert all(np.isfinite(v) for v in encdec_bundle.heldout_losses.values())

    def test_save_and_load(self, encdec_bundle, tiny_dataset, tmp_path):
        save_bundle(encdec_bundle, tmp_path / "bundle")
        loaded = load_bundle(tmp_path / "bundle")
        assert loaded.fingerprint == encdec_bundle.fingerprint
        assert loaded.lm_kind == encdec_bundle.lm_kind
        image = tiny_dataset.samples[0].image
        assert np.array_equal(vision_encode(loaded, image)[0].data, vision_encode(encdec_bundle, image)[0].data)

    def test_load_detects_tampering(self, encdec_bundle, tmp_path):
        root = save_bundle(encdec_bundle, tmp_path / "bundle")
        name = sorted((root / "tensors").glob("lm.*.tnsr"))[0]
        values = load_tensor(name).data
        save_tensor(values + 1.0, name)
        with pytest.raises(FormatError):
            load_bundle(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            load_bundle(tmp_path)

