"""
Tests for the autodiff tensor core, gradient checking, seeded streams and the
TNSR format
"""

import math

import numpy as np
import pytest

from fusion_lab.errors import ContractError, FormatError, ShapeError
from fusion_lab.tensor.core import (
    Tensor,
    backward,
    concat,
    cross_entropy,
    gelu,
    get_default_dtype,
    layer_norm,
    log_softmax,
    matmul,
    mse_loss,
    no_grad,
    precision,
    softmax,
    tensor_create,
)
from fusion_lab.tensor.gradcheck import grad_check
from fusion_lab.tensor.rng import Rng
from fusion_lab.tensor.serialization import decode_tensor, encode_tensor, load_tensor, save_tensor


def _param(rng: Rng, *shape) -> Tensor:
    with precision("float64"):
        return Tensor(rng.normal(shape), requires_grad=True)


class TestTensorCreate:
    """Tensor construction"""

    def test_zeros_and_ones(self):
        assert np.all(tensor_create([2, 3]).data == 0.0)
        assert np.all(tensor_create([2, 3], init="ones").data == 1.0)

    def test_explicit_values_row_major(self):
        t = tensor_create([2, 2], init="values", values=[1, 2, 3, 4])
        assert t.data.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_value_count_mismatch(self):
        with pytest.raises(ShapeError):
            tensor_create([2, 2], init="values", values=[1, 2, 3])

    def test_empty_or_zero_dims_rejected(self):
        with pytest.raises(ShapeError):
            tensor_create([])
        with pytest.raises(ShapeError):
            tensor_create([3, 0])

    def test_normal_needs_rng(self):
        with pytest.raises(ContractError):
            tensor_create([2], init="normal")

    def test_default_precision_is_32_bit(self):
        assert get_default_dtype() == np.float32
        with precision("float64"):
            assert tensor_create([1]).dtype == np.float64
        assert tensor_create([1]).dtype == np.float32


class TestOperations:
    """Forward semantics of the differentiable operations"""

    def test_matmul_shapes(self):
        a = tensor_create([2, 3], init="ones")
        b = tensor_create([3, 4], init="ones")
        assert matmul(a, b).shape == (2, 4)
        with pytest.raises(ShapeError):
            matmul(a, a)

    def test_softmax_rows_sum_to_one_at_large_magnitude(self):
        with precision("float64"):
            x = Tensor(Rng(1).normal((5, 7), std=1e3))
            out = softmax(x, axis=-1)
        assert np.all(out.data >= 0.0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_mask_gives_exact_zeros(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, False, True], [True, True, True]])
        out = softmax(x, mask=mask)
        assert out.data[0, 1] == 0.0
        assert np.allclose(out.data[0], [0.5, 0.0, 0.5])

    def test_softmax_fully_masked_row_rejected(self):
        x = Tensor(np.zeros((1, 2)))
        with pytest.raises(ContractError):
            softmax(x, mask=np.array([[False, False]]))

    def test_layer_norm_constant_row_maps_to_bias(self):
        x = Tensor(np.full((2, 4), 3.0))
        gain = Tensor(np.full(4, 2.0))
        bias = Tensor(np.arange(4.0))
        out = layer_norm(x, gain, bias)
        assert np.array_equal(out.data, np.tile(np.arange(4.0), (2, 1)))

    def test_layer_norm_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_cross_entropy_of_uniform_logits(self):
        logits = Tensor(np.zeros((3, 10)))
        assert cross_entropy(logits, [1, 2, 3]).item() == pytest.approx(math.log(10))

    def test_concat_allows_empty_pieces(self):
        a = Tensor(np.ones((0, 3)))
        b = Tensor(np.ones((2, 3)))
        assert concat([a, b]).shape == (2, 3)


class TestBackward:
    """Gradient accumulation"""

    def test_square_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(x * x)
        assert float(x.grad) == pytest.approx(6.0)

    def test_gradients_accumulate_until_reset(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * 2.0).sum())
        backward((x * 2.0).sum())
        assert np.allclose(x.grad, [4.0, 4.0])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert y.is_leaf


class TestGradCheck:
    """Finite-difference verification, 64-bit"""

    def test_square_is_exact(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8

    @pytest.mark.parametrize(
        "build",
        [
            lambda a, b: matmul(a, b).sum(),
            lambda a, b: (softmax(matmul(a, b)) * matmul(a, b)).sum(),
            lambda a, b: log_softmax(matmul(a, b)).mean(),
            lambda a, b: gelu(matmul(a, b)).sum(),
            lambda a, b: mse_loss(matmul(a, b), Tensor(np.ones((3, 2)))),
            lambda a, b: cross_entropy(matmul(a, b), [0, 1, 1]),
            lambda a, b: (concat([a, b.transpose()]) ** 2).mean(),
            lambda a, b: (a[1:] / (b.sum() * b.sum() + 1.0)).sum(),
        ],
    )
    def test_operations(self, build):
        rng = Rng(11)
        a, b = _param(rng, 3, 4), _param(rng, 4, 2)
        assert grad_check(lambda: build(a, b), [a, b]) < 1e-4

    def test_layer_norm(self):
        rng = Rng(12)
        x, gain, bias = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5)
        weights = Tensor(rng.normal((3, 5), dtype=np.float64))
        assert grad_check(lambda: (layer_norm(x, gain, bias) * weights).sum(), [x, gain, bias]) < 1e-4

    def test_parameters_restored(self):
        x = Tensor(np.array([1.5], dtype=np.float32), requires_grad=False)
        grad_check(lambda: (x * x).sum(), [x])
        assert x.dtype == np.float32
        assert not x.requires_grad
        assert x.grad is None


class TestRng:
    """Seeded, splittable streams"""

    def test_same_seed_same_draws(self):
        assert np.array_equal(Rng(5).normal((4,)), Rng(5).normal((4,)))

    def test_spawn_is_order_independent(self):
        parent = Rng(5)
        first = parent.spawn("a").normal((3,))
        parent.spawn("b").normal((3,))
        assert np.array_equal(first, Rng(5).spawn("a").normal((3,)))
        assert not np.array_equal(first, Rng(5).spawn("b").normal((3,)))

    def test_seed_range(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestTensorFormat:
    """TNSR encoding"""

    def test_file_round_trip_keeps_dtype(self, tmp_path):
        values = Rng(2).normal((2, 3, 4), dtype=np.float64)
        save_tensor(values, tmp_path / "t.tnsr")
        loaded = load_tensor(tmp_path / "t.tnsr")
        assert loaded.dtype == np.float64
        assert np.array_equal(loaded.data, values)

    def test_bad_magic(self):
        payload = bytearray(encode_tensor(np.ones(2, dtype=np.float32)))
        payload[:4] = b"XXXX"
        with pytest.raises(FormatError) as info:
            decode_tensor(bytes(payload))
        assert info.value.offset == 0

    def test_truncated_values(self):
        payload = encode_tensor(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(FormatError, match="value bytes"):
            decode_tensor(payload[:-1])

    def test_integer_arrays_rejected(self):
        with pytest.raises(FormatError):
            encode_tensor(np.ones(2, dtype=np.int64))
