from dataclasses import dataclass

import numpy as np

from ..errors import RangeError, ShapeError


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image as a [3, H, W] float array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ShapeError(f"Image pixels must be [3, H, W], got {list(pixels.shape)}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise RangeError("Image pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]
