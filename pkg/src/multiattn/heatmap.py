"""Grayscale heatmap export as binary PGM (portable graymap).

The format is deliberately dependency-free: magic bytes ``P5``, ASCII width,
height, and maxval (255), one newline, then width*height raw bytes in
row-major order. Values are attention masses in [0, 1], mapped linearly so
that mass 1.0 is white (255).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import DataError


def write_pgm(path, values) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"heatmap wants a non-empty 2-D array, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("heatmap values must lie in [0, 1]")
    pixels = np.round(arr * 255.0).astype(np.uint8)
    height, width = pixels.shape
    header = f"P5 {width} {height} 255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`, returning floats in [0, 1]."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 1)
    fields = parts[0].split()
    if len(fields) != 4 or fields[0] != b"P5" or fields[3] != b"255":
        raise DataError(f"not a heatmap PGM: {path}")
    width, height = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(parts[1], dtype=np.uint8)
    if pixels.size != width * height:
        raise DataError(f"PGM payload size mismatch in {path}")
    return pixels.reshape(height, width).astype(np.float64) / 255.0
