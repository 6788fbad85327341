"""Binary P6 PPM reader/writer (8-bit, maxval 255)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .attributes import Image


class PpmError(ValueError):
    pass


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(path) -> Image:
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise PpmError(f"{path}: not a binary P6 PPM (magic {magic!r})")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    w, h, mv = int(width), int(height), int(maxval)
    if mv != 255:
        raise PpmError(f"{path}: unsupported maxval {mv}")
    pos += 1  # single whitespace byte after the header
    expected = w * h * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise PpmError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    return Image(np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy())


def write_ppm(img: Image, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())
