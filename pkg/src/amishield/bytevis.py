"""Byte-to-color mapping and space-filling-curve rendering.

Each byte value falls into one of five color classes (null, space,
printable, control, extended) and each byte offset within a fixed-size
chunk is placed on a 2^order x 2^order grid along a Hilbert or zigzag
curve. The Hilbert layout keeps consecutive bytes in adjacent pixels,
so structurally similar payloads produce visually similar images.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

CURVES = ("hilbert", "zigzag")

# Class order is fixed; feature vectors index into it.
CLASS_TAGS = ("black", "white", "blue", "green", "red")
PALETTE = np.array(
    [
        (0, 0, 0),  # black: 0x00
        (255, 255, 255),  # white: 0xFF
        (0, 0, 255),  # blue: printable 0x20-0x7E
        (0, 255, 0),  # green: control 0x01-0x1F, 0x7F
        (255, 0, 0),  # red: extended 0x80-0xFE
    ],
    dtype=np.uint8,
)


class IndexOutOfRange(ValueError):
    """Curve index outside 0..4^order-1."""


@dataclass(frozen=True)
class ColorClass:
    tag: str
    rgb: tuple[int, int, int]


def _class_index_table() -> np.ndarray:
    table = np.empty(256, dtype=np.uint8)
    table[0x00] = 0
    table[0xFF] = 1
    table[0x20:0x7F] = 2
    table[0x01:0x20] = 3
    table[0x7F] = 3
    table[0x80:0xFF] = 4
    return table


BYTE_CLASS = _class_index_table()


def classify_byte(b: int) -> ColorClass:
    """Map a byte value 0..255 to its color class."""
    if not 0 <= b <= 255:
        raise ValueError(f"byte value out of range: {b}")
    idx = int(BYTE_CLASS[b])
    return ColorClass(CLASS_TAGS[idx], tuple(int(c) for c in PALETTE[idx]))


@lru_cache(maxsize=32)
def _hilbert_xy(order: int) -> tuple[np.ndarray, np.ndarray]:
    # Iterative bit-interleaving walk; base cell order (0,0),(0,1),(1,1),(1,0).
    n = 1 << order
    t = np.arange(n * n, dtype=np.int64)
    x = np.zeros(n * n, dtype=np.int64)
    y = np.zeros(n * n, dtype=np.int64)
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x = x + s * rx
        y = y + s * ry
        t = t // 4
        s *= 2
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


@lru_cache(maxsize=32)
def _zigzag_xy(order: int) -> tuple[np.ndarray, np.ndarray]:
    n = 1 << order
    idx = np.arange(n * n, dtype=np.int64)
    y = idx // n
    x = idx % n
    x = np.where(y % 2 == 1, n - 1 - x, x)
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


def curve_xy(order: int, curve: str = "hilbert") -> tuple[np.ndarray, np.ndarray]:
    """Column and row arrays for every curve index of the given order."""
    if order < 1:
        raise ValueError("curve order must be >= 1")
    if curve == "hilbert":
        return _hilbert_xy(order)
    if curve == "zigzag":
        return _zigzag_xy(order)
    raise ValueError(f"unknown curve {curve!r}")


def curve_point(index: int, order: int, curve: str = "hilbert") -> tuple[int, int]:
    """(column, row) of one curve index; bijective onto the grid."""
    if not 0 <= index < 4**order:
        raise IndexOutOfRange(f"index {index} outside 0..{4 ** order - 1}")
    xs, ys = curve_xy(order, curve)
    return int(xs[index]), int(ys[index])


@dataclass(frozen=True)
class VisImage:
    """One rendered chunk: an RGB pixel grid plus layout metadata."""

    side: int
    pixels: np.ndarray  # (side, side, 3) uint8
    curve: str
    source_length: int  # payload bytes in this chunk, before zero padding

    def __post_init__(self):
        if self.side < 2 or self.side & (self.side - 1):
            raise ValueError("image side must be a power of two >= 2")
        if self.pixels.shape != (self.side, self.side, 3):
            raise ValueError("pixel grid does not match side")

    def class_counts(self) -> np.ndarray:
        """Pixel count per color class, in CLASS_TAGS order."""
        flat = self.pixels.reshape(-1, 3)
        eq = (flat[:, None, :] == PALETTE[None, :, :]).all(axis=2)
        return eq.sum(axis=0)


def render(sample, order: int = 5, curve: str = "hilbert") -> list[VisImage]:
    """Render a payload into one image per 4^order-byte chunk.

    The final chunk is zero-padded; an empty payload still yields one
    all-padding image. Accepts a ByteSample or a raw byte string.
    """
    if order < 1:
        raise ValueError("curve order must be >= 1")
    payload = sample if isinstance(sample, (bytes, bytearray)) else sample.payload
    payload = bytes(payload)
    xs, ys = curve_xy(order, curve)
    side = 1 << order
    chunk = side * side

    nchunks = max(1, -(-len(payload) // chunk))
    images = []
    for c in range(nchunks):
        piece = payload[c * chunk : (c + 1) * chunk]
        src_len = len(piece)
        buf = np.zeros(chunk, dtype=np.uint8)
        buf[:src_len] = np.frombuffer(piece, dtype=np.uint8)
        classes = BYTE_CLASS[buf]
        pixels = np.zeros((side, side, 3), dtype=np.uint8)
        pixels[ys, xs] = PALETTE[classes]
        images.append(VisImage(side, pixels, curve, src_len))
    return images


def to_png(image: VisImage, path) -> None:
    Image.fromarray(image.pixels, "RGB").save(path, format="PNG")


def from_png(path, curve: str = "hilbert") -> VisImage:
    """Load an exported PNG back into a VisImage (curve tag is metadata)."""
    arr = np.asarray(Image.open(path).convert("RGB"))
    if arr.shape[0] != arr.shape[1]:
        raise ValueError("visualization images are square")
    return VisImage(arr.shape[0], arr, curve, arr.shape[0] * arr.shape[1])


def to_flat_bytes(image: VisImage) -> bytes:
    """side^2 x 3 raw bytes, pixel triples in curve-index order."""
    order = int(np.log2(image.side))
    xs, ys = curve_xy(order, image.curve)
    return image.pixels[ys, xs].tobytes()
