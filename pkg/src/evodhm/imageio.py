"""Binary PPM/PGM (P6/P5, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up."""
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 (P6) or H x W (P5) uint8 array."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("write_ppm expects uint8 data; see to_uint8")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PPM header in {path}")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported PPM variant in {path}")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    if len(data) - pos < size:
        raise DataError(f"truncated PPM payload in {path}")
    arr = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()
