"""
Minimal parameter container in the spirit of torch.nn.Module.

Parameters are Tensor attributes; child modules may be attributes or lists of
modules. Enumeration order is attribute insertion order, which keeps
state dicts, fingerprints and optimizer state deterministic.
"""

from typing import Dict, Iterator, List, Tuple

import numpy as np

from ..errors import ShapeError
from ..tensor.core import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{index}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{index}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze(self):
        """Stop gradient tracking and make every parameter array read-only."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"State dict mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise ShapeError(f"Shape mismatch for {name}: {list(array.shape)} vs {list(p.shape)}")
            p.data = np.array(array, dtype=array.dtype, copy=True)
