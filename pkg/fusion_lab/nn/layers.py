"""
Parameterized layers: affine maps, layer norm, token tables, feed-forward and
attention parameter sets.
"""

import math
from typing import Optional

import numpy as np

from ..errors import ShapeError
from ..tensor import core
from ..tensor.core import Tensor, gelu, layer_norm
from ..tensor.rng import Rng
from .module import Module


class Linear(Module):
    """
    Affine map x @ weight + bias.

    Args:
        in_dim, out_dim: Input and output feature sizes
        rng: Generator for the normal initializer
        init: "normal" (std 1/sqrt(in_dim) unless `std` is given), "zeros"
            or "identity" (needs in_dim == out_dim)
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: Optional[Rng] = None,
        init: str = "normal",
        std: Optional[float] = None,
        bias: bool = True,
    ):
        self.in_dim, self.out_dim = in_dim, out_dim
        dtype = core.get_default_dtype()
        if init == "normal":
            weight = rng.normal((in_dim, out_dim), std=std if std is not None else 1.0 / math.sqrt(in_dim))
        elif init == "zeros":
            weight = np.zeros((in_dim, out_dim), dtype=dtype)
        elif init == "identity":
            if in_dim != out_dim:
                raise ShapeError(f"Identity init needs a square map, got {in_dim}x{out_dim}")
            weight = np.eye(in_dim, dtype=dtype)
        else:
            raise ValueError(f"Unknown init '{init}'")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got {list(x.shape)}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        dtype = core.get_default_dtype()
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class TokenTable(Module):
    """Learned token embedding table [vocab_size, dim]."""

    def __init__(self, vocab_size: int, dim: int, rng: Rng, std: float = 0.5):
        self.vocab_size = vocab_size
        self.table = Tensor(rng.normal((vocab_size, dim), std=std), requires_grad=True)


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: Rng):
        self.up = Linear(dim, ff_dim, rng.spawn("up"))
        self.down = Linear(ff_dim, dim, rng.spawn("down"), std=0.5 / math.sqrt(ff_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class AttentionParams(Module):
    """
    Projections of one multi-head attention block.

    Args:
        dim: Width of the query stream (and of the output)
        num_heads: Number of heads; must divide dim
        kv_dim: Width of the key/value stream (defaults to dim)
    """

    def __init__(self, dim: int, num_heads: int, rng: Rng, kv_dim: Optional[int] = None):
        if dim % num_heads != 0:
            raise ShapeError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.dim = dim
        self.kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng.spawn("q"))
        self.k_proj = Linear(self.kv_dim, dim, rng.spawn("k"))
        self.v_proj = Linear(self.kv_dim, dim, rng.spawn("v"))
        self.out_proj = Linear(dim, dim, rng.spawn("out"), std=0.5 / math.sqrt(dim))
