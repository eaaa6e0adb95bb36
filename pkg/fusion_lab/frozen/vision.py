"""
Toy vision transformer: non-overlapping patches, a linear patch embedding,
a learned aggregate token in front, and a pre-norm encoder stack.
"""

from typing import Tuple

import numpy as np

from ..errors import ShapeError
from ..nn.blocks import LayerStates, TransformerEncoder, encoder_forward, sinusoidal_positions
from ..nn.config import BlockConfig
from ..nn.layers import Linear
from ..nn.module import Module
from ..tensor import core
from ..tensor.core import Tensor, concat
from ..tensor.rng import Rng
from .image import Image


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Cut a [C, H, W] image into row-major patches.

    Returns:
        np.ndarray: [(H/p)*(W/p), C*p*p]
    """
    channels, height, width = pixels.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"Image {height}x{width} is not divisible into {patch_size}x{patch_size} patches")
    rows, cols = height // patch_size, width // patch_size
    grid = pixels.reshape(channels, rows, patch_size, cols, patch_size)
    return grid.transpose(1, 3, 0, 2, 4).reshape(rows * cols, channels * patch_size * patch_size)


class VisionEncoder(Module):
    def __init__(self, config: BlockConfig, image_size: int, patch_size: int, rng: Rng):
        if image_size % patch_size:
            raise ShapeError(f"image_size {image_size} is not a multiple of patch_size {patch_size}")
        self.config = config
        self.image_size = image_size
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.patch_embed = Linear(3 * patch_size * patch_size, config.model_dim, rng.spawn("patch"))
        self.aggregate_token = Tensor(rng.spawn("aggregate").normal((1, config.model_dim), std=0.5), requires_grad=True)
        self.encoder = TransformerEncoder(config, rng.spawn("encoder"))


def vision_forward(encoder: VisionEncoder, image: Image) -> Tuple[Tensor, LayerStates]:
    """
    Encode an image into [num_patches + 1, d_v] features; row 0 is the
    aggregate token.
    """
    expected = (3, encoder.image_size, encoder.image_size)
    if image.pixels.shape != expected:
        raise ShapeError(f"Expected image of shape {list(expected)}, got {list(image.pixels.shape)}")
    patches = patchify(image.pixels.astype(core.get_default_dtype()), encoder.patch_size)
    tokens = concat([encoder.aggregate_token, encoder.patch_embed(Tensor(patches))])
    dim = encoder.config.model_dim
    x = tokens + Tensor(sinusoidal_positions(range(encoder.num_patches + 1), dim))
    return encoder_forward(x, encoder.encoder, capture=True)
