"""
PARAMETER CHECKPOINTS
=====================

Versioned binary format for named tensors:

    magic      4 bytes   b"NFCS"
    version    uint16    FORMAT_VERSION
    count      uint32    number of tensors
    per tensor:
        name_len uint16, name (UTF-8)
        dtype    uint8    0 = fp32, 1 = fp64
        ndim     uint8
        dims     uint32 * ndim
        payload  little-endian values, row-major

All integers are little-endian.
"""

import logging
import os
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"NFCS"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def encode_tensors(tensors: Dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", version, len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"Tensor '{name}' has unsupported dtype {array.dtype}")
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise CheckpointError("Not a parameter checkpoint (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<HI", payload, 4)
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint header: {e}") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    offset = 10
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", payload, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"Tensor '{name}' payload is truncated")
            tensors[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint: {e}") from e
    return tensors


def save_tensors(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found at {path}")
    return decode_tensors(path.read_bytes())
