"""Minimal binary Netpbm (P5/P6) reader and writer, 8- or 16-bit."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def write_pnm(path, img: np.ndarray) -> None:
    """Write a uint8/uint16 array: [H,W] as P5, [H,W,3] as P6. 16-bit samples are big-endian."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        maxval, dt = 255, ">u1"
    elif img.dtype == np.uint16:
        maxval, dt = 65535, ">u2"
    else:
        raise PnmError(f"{path}: unsupported dtype {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PnmError(f"{path}: unsupported shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    Path(path).write_bytes(header + np.ascontiguousarray(img, dtype=dt).tobytes())


def _tokens(raw: bytes, count: int, path):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    out, i, n = [], 0, len(raw)
    while len(out) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i : i + 1] == b"#":
            while i < n and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise PnmError(f"{path}: truncated header")
        out.append(raw[i:j])
        i = j
    # exactly one whitespace byte separates header from raster
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    toks, off = _tokens(raw, 4, path)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PnmError(f"{path}: malformed header") from exc
    channels = 3 if magic == b"P6" else 1
    dt = ">u1" if maxval < 256 else ">u2"
    count = w * h * channels
    nbytes = count * np.dtype(dt).itemsize
    if len(raw) - off < nbytes:
        raise PnmError(f"{path}: truncated raster")
    a = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    a = a.astype(np.uint8 if maxval < 256 else np.uint16)
    return a.reshape(h, w, 3) if channels == 3 else a.reshape(h, w)
