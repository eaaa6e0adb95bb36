"""
Encoder-output cache with invocation accounting.

Grounded pipelines only ever feed the prompt to the frozen encoder, so its
output can be memoized per exact token-id sequence. Standard pipelines feed
query-bearing sequences that change every step; they go through
`encode_uncached`, which counts the call without storing anything.
"""

from typing import Dict, Sequence, Tuple

from ..frozen.bundle import FrozenBundle, lm_encode, lm_layer_states
from ..tensor.core import Tensor, no_grad


class EncoderCache:
    def __init__(self, bundle: FrozenBundle, enabled: bool = True):
        self.bundle = bundle
        self.enabled = enabled
        self._entries: Dict[Tuple, Tensor] = {}
        self.encoder_calls = 0
        self.cache_hits = 0
        self.cache_misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def _lookup(self, key: Tuple, compute) -> Tensor:
        if self.enabled and key in self._entries:
            self.cache_hits += 1
            return self._entries[key]
        self.cache_misses += 1
        self.encoder_calls += 1
        with no_grad():
            value = compute()
        if self.enabled:
            self._entries[key] = value
        return value

    def encode(self, prompt_ids: Sequence[int]) -> Tensor:
        """Encoder output for the prompt alone, from the cache when possible."""
        key = ("encoder", tuple(int(t) for t in prompt_ids))
        return self._lookup(key, lambda: lm_encode(self.bundle, prompt_ids)[0])

    def layer_states(self, prompt_ids: Sequence[int], layer: int) -> Tensor:
        """Prompt hidden states at one decoder-only layer, cached per (prompt, layer)."""
        key = ("layer", layer, tuple(int(t) for t in prompt_ids))
        return self._lookup(key, lambda: lm_layer_states(self.bundle, prompt_ids)[layer])

    def encode_uncached(self, prompt_ids: Sequence[int], extra_states: Tensor, placement: str = "before") -> Tensor:
        """Encoder pass over a query-bearing sequence; counted, never stored."""
        self.encoder_calls += 1
        return lm_encode(self.bundle, prompt_ids, extra_states, placement)[0]

    def counters(self) -> Dict[str, int]:
        return {
            "encoder_calls": self.encoder_calls,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
        }

    def clear(self):
        """Drop stored encodings; counters keep running."""
        self._entries.clear()
