"""
TNSR binary tensor format.

Layout (little-endian): magic b"TNSR", format version u32, dtype code u8
(0 = float32, 1 = float64), rank u32, rank dims as u64, then row-major values.
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError
from .core import Tensor

MAGIC = b"TNSR"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sIBI")


def encode_tensor(tensor: Union[Tensor, np.ndarray]) -> bytes:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    dtype = data.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise FormatError(f"Unsupported dtype {data.dtype} for TNSR encoding")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_CODES[dtype], data.ndim)
    dims = struct.pack(f"<{data.ndim}Q", *data.shape)
    return header + dims + np.ascontiguousarray(data, dtype=dtype).tobytes()


def decode_tensor(payload: bytes) -> Tensor:
    if len(payload) < _HEADER.size:
        raise FormatError("Truncated TNSR header", offset=len(payload))
    magic, version, code, rank = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"Unsupported TNSR version {version}", offset=4)
    if code not in CODE_DTYPES:
        raise FormatError(f"Unknown dtype code {code}", offset=8)
    offset = _HEADER.size
    if len(payload) < offset + 8 * rank:
        raise FormatError("Truncated TNSR dims", offset=len(payload))
    dims = struct.unpack_from(f"<{rank}Q", payload, offset)
    offset += 8 * rank
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise FormatError(
            f"Expected {expected} value bytes, found {len(payload) - offset}", offset=len(payload)
        )
    values = np.frombuffer(payload, dtype=dtype, offset=offset).reshape(dims)
    return Tensor(values.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(tensor: Union[Tensor, np.ndarray], path: Union[str, Path]):
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path: Union[str, Path]) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
