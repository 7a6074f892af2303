"""Geometric primitives and dense-grid sampling shared by the whole pipeline.

Conventions used everywhere:
  * dense float tensors are numpy arrays of shape (C, H, W), float64;
  * images are uint8 arrays, (H, W) for gray and (H, W, 3) for RGB;
  * pixel centers sit at integer coordinates, x runs along columns,
    y along rows (y grows downward);
  * rotation by ``theta`` maps the x axis onto (cos t, -sin t), matching
    the affine warp matrix below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Disparity(NamedTuple):
    """Integer pixel translation aligning the IR image to the RGB image."""

    d_x: int
    d_y: int


@dataclass(frozen=True)
class RotatedBox:
    """Rotated rectangle (x_c, y_c, w, h, theta), theta in radians."""

    x_c: float
    y_c: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if not (-math.pi / 2 < self.theta <= math.pi / 2):
            raise ValueError(f"theta must lie in (-pi/2, pi/2], got {self.theta}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_c, self.y_c)


def rot2d(theta: float) -> np.ndarray:
    """2x2 rotation used by the warp matrix: x axis -> (cos t, -sin t)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def box_corners(box: RotatedBox) -> np.ndarray:
    """Corners of the box as a (4, 2) array of (x, y) points.

    Order is fixed: (-w/2,-h/2), (+w/2,-h/2), (+w/2,+h/2), (-w/2,+h/2)
    in the box frame, each mapped through the box rotation.
    """
    offs = np.array(
        [
            [-box.w / 2, -box.h / 2],
            [+box.w / 2, -box.h / 2],
            [+box.w / 2, +box.h / 2],
            [-box.w / 2, +box.h / 2],
        ]
    )
    return np.array([box.x_c, box.y_c]) + offs @ rot2d(box.theta).T


def check_tensor(t: np.ndarray) -> np.ndarray:
    """Validate the (C, H, W) layout and finiteness of a dense tensor."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite entries")
    return t


def bilinear_weights(shape_hw: tuple[int, int], xs: np.ndarray, ys: np.ndarray):
    """Neighbor indices and weights for zero-padded bilinear interpolation.

    Returns (ix0, iy0, valid corner masks, corner weights) suited to both
    sampling and the transposed scatter used for gradients. ``xs``/``ys``
    can be any-dimensional coordinate arrays.
    """
    h, w = shape_hw
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    ix0 = x0.astype(np.int64)
    iy0 = y0.astype(np.int64)

    wts = (
        (1 - fx) * (1 - fy),  # (x0, y0)
        fx * (1 - fy),        # (x0+1, y0)
        (1 - fx) * fy,        # (x0, y0+1)
        fx * fy,              # (x0+1, y0+1)
    )
    corners = ((ix0, iy0), (ix0 + 1, iy0), (ix0, iy0 + 1), (ix0 + 1, iy0 + 1))
    masks = tuple(
        (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h) for cx, cy in corners
    )
    return corners, masks, wts


def bilinear_sample_many(t: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample a (C, H, W) tensor at many points, zero outside.

    ``xs`` and ``ys`` share an arbitrary shape S; the result has shape
    (C,) + S.
    """
    t = check_tensor(t)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("sample coordinates must be finite")
    c, h, w = t.shape
    corners, masks, wts = bilinear_weights((h, w), xs, ys)
    out = np.zeros((c,) + xs.shape)
    for (cx, cy), m, wt in zip(corners, masks, wts):
        cxc = np.clip(cx, 0, w - 1)
        cyc = np.clip(cy, 0, h - 1)
        out += t[:, cyc, cxc] * (wt * m)
    return out


def bilinear_sample(t: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear interpolation of the 4 neighbors of (x, y), one value per channel.

    Coordinates outside [0, W-1] x [0, H-1] read as zero.
    """
    return bilinear_sample_many(t, np.float64(x), np.float64(y))


def affine_matrix(theta: float, center: tuple[float, float]) -> np.ndarray:
    """2x3 warp matrix rotating by ``theta`` about ``center``.

    The matrix maps output coordinates to source coordinates, and the
    center is a fixed point of the map.
    """
    c, s = math.cos(theta), math.sin(theta)
    xc, yc = center
    return np.array(
        [
            [c, s, (1 - c) * xc - s * yc],
            [-s, c, s * xc + (1 - c) * yc],
        ]
    )


def affine_warp(t: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Warp a (C, H, W) tensor; ``m`` maps output pixels to source points."""
    t = check_tensor(t)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 3):
        raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("affine matrix contains non-finite entries")
    _, h, w = t.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    src_y = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return bilinear_sample_many(t, src_x, src_y)


def translate_image(img: np.ndarray, d: Disparity | tuple[int, int]) -> np.ndarray:
    """Translate by ``d``: output (x, y) reads input (x + d_x, y + d_y).

    Content displaced by +d relative to a reference lands back on the
    reference; out-of-range reads are zero. Works on (H, W) and (H, W, C)
    arrays; dtype is preserved.
    """
    dx, dy = int(d[0]), int(d[1])
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    src_y0, src_y1 = max(0, dy), min(h, h + dy)
    src_x0, src_x1 = max(0, dx), min(w, w + dx)
    if src_y0 >= src_y1 or src_x0 >= src_x1:
        return out
    dst_y0, dst_x0 = src_y0 - dy, src_x0 - dx
    out[dst_y0 : dst_y0 + (src_y1 - src_y0), dst_x0 : dst_x0 + (src_x1 - src_x0)] = img[
        src_y0:src_y1, src_x0:src_x1
    ]
    return out


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    """uint8 image (H, W) or (H, W, 3) -> float tensor (C, H, W) in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return arr.transpose(2, 0, 1)


def tensor_to_gray_image(t: np.ndarray) -> np.ndarray:
    """Single-channel float tensor in [0, 1] -> uint8 (H, W) image."""
    t = check_tensor(t)
    if t.shape[0] != 1:
        raise ValueError("expected a single-channel tensor")
    return np.clip(np.round(t[0] * 255.0), 0, 255).astype(np.uint8)
