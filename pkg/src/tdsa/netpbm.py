"""Binary NetPBM image I/O: P6 color images and P5 grayscale masks/heatmaps.

Writers emit a fixed, canonical header so identical pixels give identical
bytes.  The reader is tolerant: arbitrary whitespace and ``#`` comments in
the header, any maxval up to 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported NetPBM content; message names the file."""


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (h, w) uint8 array as binary PGM."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise NetpbmError(f"{path}: PGM needs a 2-D array, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (h, w, 3) uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"{path}: PPM needs (h, w, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def _read_header(f, path) -> tuple[bytes, int, int, int]:
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    fields = []
    while len(fields) < 3:
        ch = f.read(1)
        if not ch:
            raise NetpbmError(f"{path}: truncated header")
        if ch == b"#":  # comment to end of line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        token = ch
        while True:
            ch = f.read(1)
            if not ch or ch.isspace():
                break
            if not ch.isdigit():
                raise NetpbmError(f"{path}: bad header token {token + ch!r}")
            token += ch
        fields.append(int(token))
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise NetpbmError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval}")
    return magic, w, h, maxval


def _read(path, magic_want: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header(f, path)
        if magic != magic_want:
            raise NetpbmError(f"{path}: expected {magic_want.decode()}, "
                              f"got {magic.decode()}")
        count = w * h * channels
        payload = f.read(count)
    if len(payload) != count:
        raise NetpbmError(f"{path}: truncated pixel data "
                          f"({len(payload)} of {count} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if maxval != 255:  # rescale odd maxvals to the full byte range
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return arr.reshape(shape).copy()


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (h, w) uint8 array."""
    return _read(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (h, w, 3) uint8 array."""
    return _read(path, b"P6", 3)
