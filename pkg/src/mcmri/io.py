"""On-disk formats: raw float images, masks, measurements and PNG helpers.

Binary layouts (all little-endian):

``MCF1`` image    magic, u32 H, u32 W, u32 reserved, then H*W float32 row-major
``MSK1`` mask     magic, u32 H, u32 W, u32 reserved, then H*W float32 (0.0 / 1.0)
``KSP1`` k-space  magic, u32 H, u32 W, then H*W interleaved float32 (re, im) pairs
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .kspace import KSpaceMeasurements, SamplingMask

IMAGE_MAGIC = b"MCF1"
MASK_MAGIC = b"MSK1"
KSPACE_MAGIC = b"KSP1"


class FormatError(ValueError):
    pass


def _write_grid16(path, magic, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<III", H, W, 0))
        fh.write(arr.tobytes())


def _read_grid16(path, magic):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    H, W, _ = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * H * W:
        raise FormatError(f"{path}: expected {4 * H * W} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W)


def write_f32_image(path, image: np.ndarray) -> None:
    _write_grid16(path, IMAGE_MAGIC, image)


def read_f32_image(path) -> np.ndarray:
    return _read_grid16(path, IMAGE_MAGIC).astype(np.float64)


def write_mask_binary(path, mask: SamplingMask) -> None:
    _write_grid16(path, MASK_MAGIC, mask.grid.astype(np.float32))


def read_mask_binary(path, ratio_target=None, kind="unknown", seed=-1) -> SamplingMask:
    grid = _read_grid16(path, MASK_MAGIC) > 0.5
    ratio = float(grid.mean()) if ratio_target is None else ratio_target
    return SamplingMask(grid, ratio, kind, seed)


def write_mask_png(path, mask: SamplingMask) -> None:
    Image.fromarray(mask.grid.astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path) -> SamplingMask:
    grid = np.asarray(Image.open(path)) > 127
    return SamplingMask(grid, float(grid.mean()), "unknown", -1)


def write_kspace(path, y: KSpaceMeasurements) -> None:
    H, W = y.values.shape
    inter = np.empty((H, W, 2), dtype="<f4")
    inter[..., 0] = y.values.real
    inter[..., 1] = y.values.imag
    with open(path, "wb") as fh:
        fh.write(KSPACE_MAGIC + struct.pack("<II", H, W))
        fh.write(inter.tobytes())


def read_kspace(path, mask: SamplingMask) -> KSpaceMeasurements:
    raw = Path(path).read_bytes()
    if raw[:4] != KSPACE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    H, W = struct.unpack("<II", raw[4:12])
    inter = np.frombuffer(raw[12:], dtype="<f4")
    if inter.size != 2 * H * W:
        raise FormatError(f"{path}: truncated payload")
    inter = inter.reshape(H, W, 2).astype(np.float64)
    values = inter[..., 0] + 1j * inter[..., 1]
    # float32 storage must not leak nonzeros off the mask
    values = np.where(mask.grid, values, 0.0)
    return KSpaceMeasurements(values, mask)


def read_png_gray(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG as float64, raw intensity scale."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
            im = im.convert("L")
        return np.asarray(im).astype(np.float64)


def write_png_gray(path, image: np.ndarray) -> None:
    """Write a uint8 array, or a float image in [0, 1], as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
