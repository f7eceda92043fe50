"""
Binary checkpoint container.

Layout (all integers little-endian)::

    magic        4 bytes   b"ASR1"
    version      uint16    format version (1)
    precision    uint8     bytes per scalar: 4 (float32) or 8 (float64)
    count        uint32    number of named arrays
    meta_len     uint32    length of the metadata block
    metadata     meta_len  UTF-8 JSON object (model kind and configuration)
    table        count x { name_len uint16, name UTF-8, ndim uint8,
                           dims ndim x uint32, offset uint64 }
    data         raw arrays in table order; offsets are relative to the
                 start of this section

Parameters and batch-normalization running statistics are stored.
"""

import json
import logging
import struct

import numpy as np

from asr.errors import ContractError

logger = logging.getLogger(__name__)

MAGIC = b"ASR1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHBII")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, state, metadata=None, precision=4):
    """Write a mapping of names to arrays (a model ``state_dict``) to ``path``."""
    if precision not in _DTYPES:
        raise ContractError(f"checkpoint precision must be 4 or 8 bytes, got {precision}")

    dtype = _DTYPES[precision]
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")

    table = bytearray()
    blobs = []
    offset = 0
    for name, array in state.items():
        array = np.ascontiguousarray(array, dtype=dtype)
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
        table += struct.pack("<Q", offset)
        blob = array.tobytes()
        blobs.append(blob)
        offset += len(blob)

    with open(path, "wb") as out:
        out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, precision, len(state), len(meta)))
        out.write(meta)
        out.write(table)
        for blob in blobs:
            out.write(blob)

    logger.debug(f"save_checkpoint: {len(state)} arrays, {offset} data bytes -> {path}")


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``.

    Returns
    -------
    tuple
        ``(state, metadata)`` where state maps names to numpy arrays.
    """
    with open(path, "rb") as src:
        raw = src.read()

    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: truncated checkpoint")

    magic, version, precision, count, meta_len = _HEADER.unpack_from(raw, 0)

    if magic != MAGIC:
        raise ContractError(f"{path}: not an ASR checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    if precision not in _DTYPES:
        raise ContractError(f"{path}: invalid precision byte {precision}")

    pos = _HEADER.size
    metadata = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len

    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))

    dtype = _DTYPES[precision]
    state = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        start = pos + offset
        state[name] = np.frombuffer(raw, dtype=dtype, count=size, offset=start).reshape(shape).copy()

    return state, metadata
