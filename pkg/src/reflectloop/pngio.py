"""Canonical PNG read/write.

Decoding accepts anything Pillow can open and yields an RGB uint8 array.
Encoding is done by hand so the byte stream is a pure function of the
pixels: non-interlaced, filter type 0 on every row, one IDAT chunk,
pinned zlib level. Golden-hash tests depend on this staying fixed.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np
from PIL import Image

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_ZLIB_LEVEL = 6


class ImageDecodeError(ValueError):
    pass


class ZeroSizeImage(ValueError):
    pass


def decode_png(data: bytes) -> np.ndarray:
    """Decode image bytes (any Pillow-supported format) to HxWx3 uint8."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc
    if arr.size == 0:
        raise ZeroSizeImage("decoded image has zero pixels")
    return arr


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(arr: np.ndarray) -> bytes:
    """Encode an HxWx3 (or HxWx4) uint8 array as a canonical PNG."""
    if arr.ndim != 3 or arr.shape[2] not in (3, 4) or arr.dtype != np.uint8:
        raise ValueError(f"expected HxWx3/4 uint8 array, got {arr.shape} {arr.dtype}")
    height, width, channels = arr.shape
    if height == 0 or width == 0:
        raise ZeroSizeImage("cannot encode a zero-size image")

    color_type = 2 if channels == 3 else 6
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)

    # Filter byte 0 prepended to each row; no per-row filter heuristics.
    raw = np.empty((height, 1 + width * channels), dtype=np.uint8)
    raw[:, 0] = 0
    raw[:, 1:] = arr.reshape(height, width * channels)
    idat = zlib.compress(raw.tobytes(), _ZLIB_LEVEL)

    return b"".join(
        [
            _PNG_MAGIC,
            _chunk(b"IHDR", ihdr),
            _chunk(b"IDAT", idat),
            _chunk(b"IEND", b""),
        ]
    )


def reencode_canonical(data: bytes) -> bytes:
    """Decode then re-encode, yielding the canonical bytes for an image."""
    return encode_png(decode_png(data))


def png_dimensions(data: bytes) -> tuple[int, int]:
    """Read (width, height) from a PNG header without a full decode."""
    if len(data) < 24 or data[:8] != _PNG_MAGIC or data[12:16] != b"IHDR":
        raise ImageDecodeError("not a PNG stream")
    width, height = struct.unpack(">II", data[16:24])
    return width, height
