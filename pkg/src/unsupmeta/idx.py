"""Reader and writer for the IDX container used by MNIST-style datasets.

Layout (big endian)::

    u8 0 | u8 0 | u8 dtype (0x08 = unsigned byte) | u8 ndim
    i32 size[0] ... i32 size[ndim - 1]
    payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08
_MAX_ITEMS = 1 << 31


class IDXFormatError(ValueError):
    pass


def read_idx(path) -> np.ndarray:
    """Raw unsigned-byte array with the stored shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError("file too short for an IDX header")
    zero0, zero1, dtype, ndim = raw[0], raw[1], raw[2], raw[3]
    if zero0 or zero1 or dtype != _UBYTE or ndim == 0:
        magic = struct.unpack(">I", raw[:4])[0]
        raise IDXFormatError(f"bad magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IDXFormatError("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ITEMS:
            raise IDXFormatError(f"dimensions {dims} overflow the supported size")
    payload = raw[header_len:]
    if len(payload) < count:
        raise IDXFormatError(f"truncated payload: expected {count} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("IDX unsigned-byte payload must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    header = bytes([0, 0, _UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def downscale2x(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes (odd edges are cropped)."""
    h, w = images.shape[-2] // 2 * 2, images.shape[-1] // 2 * 2
    im = images[..., :h, :w]
    return im.reshape(*im.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def load_idx(path, downscale: bool = False) -> np.ndarray:
    """Images come back as floats in [0, 1]; label files as integers."""
    raw = read_idx(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    images = raw.astype(np.float64) / 255.0
    if downscale:
        images = downscale2x(images)
    return images
