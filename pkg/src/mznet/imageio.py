"""Binary PPM (P6, 8-bit) reading and writing.

Images travel as [0, 1] float tensors; quantization to 8 bits rounds half
away from zero and only happens at file boundaries.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .engine import Tensor


class ImageIOError(IOError):
    pass


def quantize(data):
    """[0,1] floats -> uint8, rounding half away from zero."""
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(data):
    return np.asarray(data, dtype=np.float64) / 255.0


def write_ppm(path, image):
    """Write a (1, 3, h, w) or (3, h, w) [0,1] image as binary P6."""
    data = image.data if hasattr(image, "data") else np.asarray(image)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ImageIOError("write_ppm expects a single image")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ImageIOError(f"write_ppm expects (3, h, w), got {data.shape}")
    h, w = data.shape[1:]
    pixels = quantize(data).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels)


def _read_token(fh):
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ImageIOError("unexpected end of PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path):
    """Read a binary P6 PPM into a (1, 3, h, w) [0,1] tensor."""
    with open(path, "rb") as fh:
        if fh.read(2) != b"P6":
            raise ImageIOError(f"{path}: not a binary PPM (P6)")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise ImageIOError(f"{path}: only maxval 255 supported, got {maxval}")
        raw = fh.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ImageIOError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return Tensor(dequantize(arr)[np.newaxis])
