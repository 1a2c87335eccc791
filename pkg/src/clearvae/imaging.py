"""Minimal lossless PNG export and tile-grid assembly.

The writer emits fixed-layout chunks with a fixed zlib level, so re-exporting
identical pixel data is byte-identical.  Grayscale (H, W) and RGB (H, W, 3)
uint8 arrays are supported; floats in [0, 1] are quantized with round-half-up
to 255 levels.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .autodiff import ContractViolation

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) or (H, W) float in [0,1] -> (H, W) or (H, W, 3) uint8."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if img.ndim == 3:
        if img.shape[0] == 1:
            img = img[0]
        elif img.shape[0] == 3:
            img = img.transpose(1, 2, 0)
        else:
            raise ContractViolation(f"expected 1 or 3 channels, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractViolation("pixel values must lie in [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png(path, img: np.ndarray) -> None:
    img = to_uint8(img)
    if img.ndim == 2:
        color_type = 0
        rows = img[:, :, None]
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type = 2
        rows = img
    else:
        raise ContractViolation(f"unsupported PNG array shape {img.shape}")
    h, w = rows.shape[:2]
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_PNG_SIGNATURE)
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(_chunk(b"IEND", b""))


def make_grid(tiles: np.ndarray, n_rows: int, n_cols: int,
              sep: int = 1, sep_value: float = 1.0) -> np.ndarray:
    """Assemble (n_rows*n_cols, C, H, W) tiles row-major into one image with
    `sep`-pixel separators; output is (C, n_rows*H + (n_rows-1)*sep, ...)."""
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim != 4 or tiles.shape[0] != n_rows * n_cols:
        raise ContractViolation(
            f"expected {n_rows * n_cols} tiles of shape (C, H, W), got {tiles.shape}")
    c, h, w = tiles.shape[1:]
    out_h = n_rows * h + (n_rows - 1) * sep
    out_w = n_cols * w + (n_cols - 1) * sep
    canvas = np.full((c, out_h, out_w), sep_value)
    for i in range(n_rows):
        for j in range(n_cols):
            r0, c0 = i * (h + sep), j * (w + sep)
            canvas[:, r0:r0 + h, c0:c0 + w] = tiles[i * n_cols + j]
    return canvas


def make_strip(tiles: np.ndarray, sep: int = 1, sep_value: float = 1.0) -> np.ndarray:
    """Horizontal strip of (n, C, H, W) tiles."""
    tiles = np.asarray(tiles, dtype=np.float64)
    return make_grid(tiles, 1, tiles.shape[0], sep=sep, sep_value=sep_value)
