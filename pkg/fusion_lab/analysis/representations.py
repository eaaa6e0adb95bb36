"""
Representation sets and the ACTV activation-dump format.

ACTV layout (little-endian): magic b"ACTV", version u32, dtype code u8
(0 = float32, 1 = float64), n_samples u64, dim u64, label length u32, UTF-8
label, then n_samples * dim row-major values.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from ..errors import ContractError, FormatError, ShapeError
from ..tensor.core import Tensor, get_default_dtype

MAGIC = b"ACTV"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sIBQQI")


@dataclass(frozen=True)
class RepresentationSet:
    """One vector per sample, e.g. the aggregate token of one layer."""

    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        points = self.points.data if isinstance(self.points, Tensor) else np.asarray(self.points)
        if points.ndim != 2:
            raise ShapeError(f"Representation points must be [n, dim], got shape {list(points.shape)}")
        if points.shape[0] < 2:
            raise ContractError(f"A representation set needs at least 2 samples, got {points.shape[0]}")
        if not np.all(np.isfinite(points)):
            raise ContractError(f"Representation set '{self.label}' has non-finite values")
        object.__setattr__(self, "points", points)

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_rows(cls, rows: Sequence[Union[Tensor, np.ndarray]], label: str = "") -> "RepresentationSet":
        """Stack per-sample vectors into a set."""
        arrays = [np.asarray(r.data if isinstance(r, Tensor) else r).reshape(-1) for r in rows]
        if len(arrays) < 2:
            raise ContractError(f"A representation set needs at least 2 samples, got {len(arrays)}")
        return cls(np.stack(arrays), label)


def layer_sets(per_sample_states: Sequence, reduce, label_prefix: str) -> List[RepresentationSet]:
    """
    One RepresentationSet per layer from per-sample LayerStates.

    Args:
        per_sample_states: LayerStates of each sample, all with the same depth
        reduce: Maps one layer's [len, dim] states to a vector (aggregate token)
        label_prefix: Label stem, suffixed with the layer index
    """
    if not per_sample_states:
        raise ContractError("No samples to build layer representations from")
    depth = per_sample_states[0].depth
    if any(s.depth != depth for s in per_sample_states):
        raise ContractError("Samples disagree on the number of layers")
    return [
        RepresentationSet.from_rows([reduce(s[layer]) for s in per_sample_states], f"{label_prefix} layer {layer} aggregate")
        for layer in range(depth + 1)
    ]


def encode_activations(rep: RepresentationSet) -> bytes:
    dtype = rep.points.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise FormatError(f"Unsupported dtype {rep.points.dtype} for ACTV encoding")
    label = rep.label.encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_CODES[dtype], rep.n_samples, rep.dim, len(label))
    return header + label + np.ascontiguousarray(rep.points, dtype=dtype).tobytes()


def decode_activations(payload: bytes) -> RepresentationSet:
    if len(payload) < _HEADER.size:
        raise FormatError("Truncated ACTV header", offset=len(payload))
    magic, version, code, n_samples, dim, label_len = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"Unsupported ACTV version {version}", offset=4)
    if code not in CODE_DTYPES:
        raise FormatError(f"Unknown dtype code {code}", offset=8)
    offset = _HEADER.size
    if len(payload) < offset + label_len:
        raise FormatError("Truncated ACTV label", offset=len(payload))
    try:
        label = payload[offset:offset + label_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"ACTV label is not UTF-8: {e}", offset=offset + e.start) from e
    offset += label_len
    dtype = CODE_DTYPES[code]
    expected = n_samples * dim * dtype.itemsize
    if len(payload) - offset != expected:
        raise FormatError(f"Expected {expected} value bytes, found {len(payload) - offset}", offset=len(payload))
    values = np.frombuffer(payload, dtype=dtype, offset=offset).reshape(n_samples, dim)
    # f32 dumps are widened when reading in 64-bit mode; f64 dumps stay f64
    target = np.result_type(dtype.newbyteorder("="), get_default_dtype())
    return RepresentationSet(values.astype(target, copy=True), label)


def save_activations(rep: RepresentationSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(encode_activations(rep))
    return path


def load_activations(path: Union[str, Path]) -> RepresentationSet:
    return decode_activations(Path(path).read_bytes())
