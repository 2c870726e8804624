"""Versioned binary checkpoints: named tensors + config digest + iteration.

Layout (all integers little-endian):

    magic "HRFK" | u32 version | u64 config digest | u64 iteration | u32 count
    then per tensor, sorted by name:
    u16 name length | name utf-8 | u8 dtype code (0=f32, 1=f64) | u8 ndim
    | ndim x u32 dims | raw payload

Model parameters are stored under their layer names, batch-norm running
stats under ``<bn name>.running_mean/var``, optimizer momentum buffers under
``opt/<param name>``.  Save/load round-trips are bit-exact.
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import ConfigError

MAGIC = b"HRFK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, digest: int, iteration: int, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQQI", VERSION, digest, iteration, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], order="C")
            if arr.dtype not in _DTYPE_CODES:
                raise ConfigError(f"checkpoint tensor {name!r} has dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """Returns (config digest, iteration, {name: array})."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        version, digest, iteration, count = struct.unpack("<IQQI", f.read(24))
        if version != VERSION:
            raise ConfigError(f"checkpoint version {version} unsupported (want {VERSION})")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dtype = _CODE_DTYPES[code]
            payload = f.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
            tensors[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")) \
                .reshape(shape).astype(dtype)
    return digest, iteration, tensors
