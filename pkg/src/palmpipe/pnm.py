"""Binary portable-pixmap IO: P6 (RGB), P5 (gray), P4 (bit masks).

Hand-rolled so dataset generation is byte-for-byte reproducible. PBM bit 1
marks foreground (mask True).
"""

from __future__ import annotations

import numpy as np


def _read_header(data: bytes, n_fields: int) -> tuple[list[int], int]:
    """Parse whitespace/comment separated header ints, return them + offset."""
    fields: list[int] = []
    i = 2  # past magic
    while len(fields) < n_fields:
        if i >= len(data):
            raise ValueError("truncated pnm header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            fields.append(int(data[i:j]))
            i = j
    return fields, i + 1  # single whitespace after last field


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = open(path, "rb").read()
    if data[:2] != b"P6":
        raise ValueError("not a raw ppm file")
    (w, h, maxval), off = _read_header(data, 3)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(data, np.uint8, count=h * w * 3, offset=off).reshape(h, w, 3).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) uint8, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    if data[:2] != b"P5":
        raise ValueError("not a raw pgm file")
    (w, h, maxval), off = _read_header(data, 3)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(data, np.uint8, count=h * w, offset=off).reshape(h, w).copy()


def write_pbm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) bool, got {mask.shape}")
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)  # MSB-first, rows padded to full bytes
    with open(path, "wb") as f:
        f.write(b"P4\n%d %d\n" % (w, h))
        f.write(packed.tobytes())


def read_pbm(path) -> np.ndarray:
    data = open(path, "rb").read()
    if data[:2] != b"P4":
        raise ValueError("not a raw pbm file")
    (w, h), off = _read_header(data, 2)
    row_bytes = (w + 7) // 8
    raw = np.frombuffer(data, np.uint8, count=h * row_bytes, offset=off)
    bits = np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(bool)
