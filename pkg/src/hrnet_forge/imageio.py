"""Binary PPM/PGM image files and a raw little-endian tensor dump.

These are the only on-disk array formats the tools use — no compressed
codecs.  PPM (P6) carries 8-bit RGB images, PGM (P5) carries 8-bit label
masks, and the ``HRTD`` dump carries float tensors of any rank.
"""
from __future__ import annotations

import struct

import numpy as np

TENSOR_MAGIC = b"HRTD"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_ppm(path, img: np.ndarray) -> None:
    """img: (h, w, 3) uint8."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM wants (h, w, 3) uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """img: (h, w) uint8."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM wants (h, w) uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def _read_netpbm_header(f, magic: bytes):
    """Returns (width, height) after consuming the header tokens."""
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise ValueError("truncated netpbm header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_netpbm_header(f, b"P6")
        data = f.read(w * h * 3)
    if len(data) != w * h * 3:
        raise ValueError(f"truncated PPM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_netpbm_header(f, b"P5")
        data = f.read(w * h)
    if len(data) != w * h:
        raise ValueError(f"truncated PGM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would upgrade 0-d to 1-d
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"tensor dump supports float32/float64, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != TENSOR_MAGIC:
            raise ValueError(f"{path} is not a tensor dump")
        code, ndim = struct.unpack("<BB", f.read(2))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        dtype = _CODE_DTYPES[code]
        data = f.read(int(np.prod(shape)) * dtype.itemsize)
    arr = np.frombuffer(data, dtype=dtype.newbyteorder("<")).reshape(shape)
    return arr.astype(dtype)


def to_float_chw(img: np.ndarray) -> np.ndarray:
    """uint8 (h, w, 3) -> float (3, h, w) in [0, 1]."""
    return img.astype(np.float64).transpose(2, 0, 1) / 255.0


def to_uint8_hwc(chw: np.ndarray) -> np.ndarray:
    """float (3, h, w) in [0, 1] -> uint8 (h, w, 3), clipped and rounded."""
    x = np.clip(np.asarray(chw), 0.0, 1.0) * 255.0
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)
