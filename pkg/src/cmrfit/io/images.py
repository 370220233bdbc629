"""8-bit binary netpbm IO: P5 (gray) masks and P6 (RGB) images."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..errors import DataError

_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Write a uint8 (H, W) array as P5 or (H, W, 3) as P6."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {a.shape} as netpbm")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 as uint8 (H, W) or (H, W, 3)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing image file: {path}") from exc
    m = _HEADER.match(raw)
    if not m:
        raise DataError(f"{path}: not a binary P5/P6 netpbm file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    data = raw[m.end():]
    if len(data) < w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    a = np.frombuffer(data[: w * h * c], dtype=np.uint8)
    return a.reshape(h, w, 3) if c == 3 else a.reshape(h, w)
