"""Synthetic datasets and IDX (MNIST-style) binary I/O."""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataFormatError
from .rng import SplitMix64

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}

IMAGES_FILE = "images.idx"
LABELS_FILE = "labels.idx"


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_TYPES[code]).tobytes()


def decode_idx(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise DataFormatError("IDX data shorter than its magic number")
    zero1, zero2, code, ndim = struct.unpack(">BBBB", blob[:4])
    if zero1 or zero2 or code not in _IDX_TYPES or ndim < 1:
        raise DataFormatError(f"bad IDX magic 0x{int.from_bytes(blob[:4], 'big'):08x}")
    end = 4 + 4 * ndim
    if len(blob) < end:
        raise DataFormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:end])
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims))
    if len(blob) - end != count * dtype.itemsize:
        raise DataFormatError(f"IDX payload has {len(blob) - end} bytes, dims {dims} need {count * dtype.itemsize}")
    return np.frombuffer(blob, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_idx(f.read())


def write_idx(path, array) -> None:
    with open(path, "wb") as f:
        f.write(encode_idx(array))


def images_to_tensor(images: np.ndarray) -> np.ndarray:
    """IDX image array -> float64 [N, C, H, W]; unsigned bytes are scaled to [0, 1]."""
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DataFormatError(f"image array must have 3 or 4 dims, got {images.ndim}")
    out = images.astype(np.float64)
    if images.dtype == np.uint8:
        out /= 255.0
    return out


def load_dataset(directory):
    images = read_idx(os.path.join(directory, IMAGES_FILE))
    labels = read_idx(os.path.join(directory, LABELS_FILE))
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    return images_to_tensor(images), labels.astype(np.int64)


def synthetic_images(samples: int, dims, classes: int, seed: int):
    """Per-class mean-shifted uniform noise, quantised to bytes.

    Labels are assigned round-robin, so classes are balanced. Returns
    ``(uint8 images [N, C, H, W], uint8 labels)``.
    """
    c, h, w = dims
    rng = SplitMix64(seed)
    noise = rng.uniform(samples * c * h * w).reshape(samples, c, h, w)
    labels = np.arange(samples) % classes
    shift = labels / max(classes - 1, 1)
    values = 0.5 * noise + 0.5 * shift[:, None, None, None]
    images = np.minimum(np.floor(values * 256.0), 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def tile_images(images: np.ndarray, reps: int) -> np.ndarray:
    """Scale H and W by ``reps`` by concatenating copies of each image."""
    return np.tile(images, (1, 1, reps, reps))


def write_dataset(directory, images, labels) -> None:
    os.makedirs(directory, exist_ok=True)
    write_idx(os.path.join(directory, IMAGES_FILE), images if images.shape[1] > 1 else images[:, 0])
    write_idx(os.path.join(directory, LABELS_FILE), labels)
