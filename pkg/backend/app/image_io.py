"""
PGM image files and the small image utilities used by artifacts (grids, boxes).
"""

import os
from typing import List, Sequence

import numpy as np

MAXVAL = 65535


class PGMFormatError(ValueError):
    """Raised when a PGM file is malformed or shorter than its header claims."""


def write_pgm(path: str, image: np.ndarray, intensity_scale: float = 1.0) -> None:
    """
    Write a 16-bit binary PGM (P5, big-endian).

    Values are clipped to [0, intensity_scale] and mapped onto 0..65535.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    levels = np.round(np.clip(image / intensity_scale, 0.0, 1.0) * MAXVAL).astype(">u2")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{MAXVAL}\n".encode("ascii"))
        handle.write(levels.tobytes())


def read_pgm(path: str, intensity_scale: float = 1.0) -> np.ndarray:
    """
    Read a binary PGM (8- or 16-bit) back to floats in [0, intensity_scale].

    Raises:
        PGMFormatError: on a header that is not P5, non-numeric or zero extents, or a short payload
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(blob) and blob[offset:offset + 1].isspace():
            offset += 1
        if blob[offset:offset + 1] == b"#":
            while offset < len(blob) and blob[offset:offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(blob) and not blob[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise PGMFormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:offset])
    if tokens[0] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMFormatError(f"{path}: non-numeric PGM header {tokens[1:]!r}") from exc
    if min(width, height, maxval) < 1 or maxval > MAXVAL:
        raise PGMFormatError(f"{path}: bad PGM extents {width}x{height}, maxval {maxval}")
    offset += 1
    dtype = ">u2" if maxval > 255 else "u1"
    needed = width * height * np.dtype(dtype).itemsize
    if len(blob) - offset < needed:
        raise PGMFormatError(f"{path}: payload has {max(len(blob) - offset, 0)} bytes, header needs {needed}")
    pixels = np.frombuffer(blob, dtype=dtype, count=width * height, offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / maxval * intensity_scale


def draw_box(image: np.ndarray, box: Sequence[float], value: float = 1.0) -> np.ndarray:
    """Burn a 1-px rectangle outline (x0, y0, x1, y1 in pixels) into a copy of image."""
    out = np.array(image, dtype=np.float64)
    height, width = out.shape
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    xs = np.clip(np.arange(min(x0, x1), max(x0, x1) + 1), 0, width - 1)
    ys = np.clip(np.arange(min(y0, y1), max(y0, y1) + 1), 0, height - 1)
    for y in (y0, y1):
        if 0 <= y < height:
            out[y, xs] = value
    for x in (x0, x1):
        if 0 <= x < width:
            out[ys, x] = value
    return out


def image_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 1, pad_value: float = 0.5) -> np.ndarray:
    """Tile equally sized images into one array, row by row."""
    if not rows or not rows[0]:
        raise ValueError("grid needs at least one image")
    height, width = np.asarray(rows[0][0]).shape
    columns = max(len(row) for row in rows)
    grid = np.full(
        (len(rows) * (height + pad) + pad, columns * (width + pad) + pad), pad_value
    )
    for r, row in enumerate(rows):
        for c, image in enumerate(row):
            top = pad + r * (height + pad)
            left = pad + c * (width + pad)
            grid[top:top + height, left:left + width] = image
    return grid


def normalize_histogram(histogram: np.ndarray) -> np.ndarray:
    total = histogram.sum()
    return histogram / total if total > 0 else histogram
