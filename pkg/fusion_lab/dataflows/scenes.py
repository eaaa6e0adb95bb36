"""
Shape scenes on a 4x4 grid and their pixel rendering.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Set, Tuple

import numpy as np

from ..errors import ContractError
from ..frozen.image import Image
from ..tensor.rng import Rng
from .tokenizer import COLORS, SHAPES

GRID_SIZE = 4
IMAGE_SIZE = 32
MAX_OBJECTS = 3
BACKGROUND = (0.0, 0.0, 0.0)

COLOR_RGB: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int

    @property
    def combination(self) -> Tuple[str, str]:
        return (self.shape, self.color)


@dataclass(frozen=True)
class Scene:
    """1-3 objects on distinct grid cells, sorted row-major by cell."""

    objects: Tuple[SceneObject, ...]
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ContractError(f"A scene holds 1-{MAX_OBJECTS} objects, got {len(self.objects)}")
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ContractError(f"Objects share a grid cell: {cells}")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ContractError(f"Unknown object {o.color} {o.shape}")
            if not (0 <= o.row < GRID_SIZE and 0 <= o.col < GRID_SIZE):
                raise ContractError(f"Cell ({o.row}, {o.col}) is off the {GRID_SIZE}x{GRID_SIZE} grid")
        object.__setattr__(self, "objects", tuple(sorted(self.objects, key=lambda o: (o.row, o.col))))

    def combinations(self) -> Set[Tuple[str, str]]:
        return {o.combination for o in self.objects}

    def contains_any(self, combinations: Iterable[Tuple[str, str]]) -> bool:
        return bool(self.combinations() & set(map(tuple, combinations)))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "objects": [[o.shape, o.color, o.row, o.col] for o in self.objects],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        objects = tuple(SceneObject(s, c, int(r), int(k)) for s, c, r, k in data["objects"])
        return cls(objects=objects, seed=int(data["seed"]))


def sample_scene(rng: Rng, seed: int = 0, num_objects: Optional[int] = None) -> Scene:
    """Draw a scene; consumes `rng` deterministically."""
    count = num_objects or int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.permutation(GRID_SIZE * GRID_SIZE)[:count]
    objects = []
    for cell in cells:
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        color = COLORS[int(rng.integers(0, len(COLORS)))]
        objects.append(SceneObject(shape, color, int(cell) // GRID_SIZE, int(cell) % GRID_SIZE))
    return Scene(objects=tuple(objects), seed=seed)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean footprint of a shape inside one size x size cell."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    center = (size - 1) / 2.0
    margin = max(size // 8, 1)
    if shape == "square":
        inner = slice(margin, size - margin)
        mask = np.zeros((size, size), dtype=bool)
        mask[inner, inner] = True
        return mask
    if shape == "circle":
        radius = size / 2.0 - margin + 0.25
        return (y - center) ** 2 + (x - center) ** 2 <= radius ** 2
    if shape == "triangle":
        top, bottom = margin, size - margin - 1
        height = max(bottom - top, 1)
        half_width = (y - top) / height * (center - margin + 0.5)
        return (y >= top) & (y <= bottom) & (np.abs(x - center) <= half_width)
    raise ContractError(f"Unknown shape '{shape}'")


def render(scene: Scene, image_size: int = IMAGE_SIZE) -> Image:
    """Draw filled primitives in their grid cells; no anti-aliasing."""
    cell = image_size // GRID_SIZE
    pixels = np.empty((3, image_size, image_size), dtype=np.float32)
    for channel, value in enumerate(BACKGROUND):
        pixels[channel].fill(value)
    for o in scene.objects:
        mask = _shape_mask(o.shape, cell)
        rows = slice(o.row * cell, (o.row + 1) * cell)
        cols = slice(o.col * cell, (o.col + 1) * cell)
        for channel, value in enumerate(COLOR_RGB[o.color]):
            pixels[channel, rows, cols][mask] = value
    return Image(pixels)
