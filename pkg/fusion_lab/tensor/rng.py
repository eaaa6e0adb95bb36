"""
Seeded, splittable random number generation.

The generator is NumPy's Philox bit generator, a counter-based generator keyed
directly by the 64-bit seed, so identical seeds give identical draw sequences
on every platform. Independent child streams are derived by hashing
(seed, label) into a new key with BLAKE2b, which keeps per-scene, per-epoch and
per-component streams stable no matter in which order they are requested.
"""

import hashlib
from typing import Sequence

import numpy as np

from . import core

MAX_SEED = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Philox-backed generator for one deterministic stream."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= MAX_SEED:
            raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, label: str) -> "Rng":
        """Child stream keyed on this seed and `label`."""
        return Rng(derive_seed(self.seed, label))

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0, dtype=None) -> np.ndarray:
        draws = self._generator.standard_normal(tuple(shape), dtype=np.float64)
        return (draws * std + mean).astype(dtype or core.get_default_dtype())

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, items: Sequence):
        return items[int(self._generator.integers(0, len(items)))]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"
