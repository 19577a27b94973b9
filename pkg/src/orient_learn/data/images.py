"""Grayscale image container plus PGM/PNG reading and PGM writing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IngestionError


@dataclass
class GrayImage:
    pixels: np.ndarray  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"grayscale image must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite intensities")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_header(buf: bytes):
    """Parse magic, width, height, maxval; returns them and the raster offset."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise IngestionError("corrupt PGM header", offset=pos)
        fields.append((m.group(1), m.start(1)))
        pos = m.end()
    magic = fields[0][0]
    values = []
    for text, start in fields[1:]:
        if not text.isdigit():
            raise IngestionError(f"non-integer PGM header field {text[:16]!r}", offset=start)
        values.append(int(text))
    width, height, maxval = values
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise IngestionError(f"invalid PGM dimensions {width}x{height} maxval {maxval}", offset=pos)
    return magic, width, height, maxval, pos


def decode_pgm(buf: bytes) -> GrayImage:
    if buf[:2] not in (b"P2", b"P5"):
        raise IngestionError(f"unsupported image format (magic {buf[:2]!r})", offset=0)
    magic, width, height, maxval, pos = _pgm_header(buf)
    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = ">u2" if maxval > 255 else "u1"
        nbytes = n * np.dtype(dtype).itemsize
        if len(buf) < pos + nbytes:
            raise IngestionError(
                f"truncated P5 raster: need {nbytes} bytes, have {len(buf) - pos}", offset=len(buf)
            )
        raw = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(np.float64)
    else:
        tokens = buf[pos:].split()
        if len(tokens) < n:
            raise IngestionError(f"P2 raster has {len(tokens)} of {n} values", offset=len(buf))
        try:
            raw = np.array([int(t) for t in tokens[:n]], dtype=np.float64)
        except ValueError:
            raise IngestionError("non-integer P2 sample", offset=pos) from None
    if raw.size and raw.max() > maxval:
        raise IngestionError(f"sample exceeds maxval {maxval}", offset=pos)
    return GrayImage((raw / maxval).reshape(height, width))


def load_image(path) -> GrayImage:
    """Load a PGM (P2/P5, 8 or 16 bit) or an 8-bit grayscale PNG."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] in (b"P2", b"P5"):
        return decode_pgm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I"):
                raise IngestionError(f"PNG mode {im.mode!r} is not grayscale", offset=25)
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0 if im.mode == "L" else 65535.0
        return GrayImage(arr / scale)
    raise IngestionError(f"unsupported image format (magic {buf[:4]!r})", offset=0)


def save_pgm(path, image: GrayImage, maxval: int = 255) -> None:
    """Write binary PGM.  Intensities are rounded to ``maxval`` levels."""
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image, np.float64)
    q = np.rint(pixels * maxval).astype(np.int64)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())
