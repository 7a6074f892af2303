"""Ground-truth training targets: Gaussian center heatmap plus size,
disparity and rotation regression values read off the annotation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from palmpipe.core import Disparity, RotatedBox

MIN_OVERLAP = 0.7
SIGMA_FLOOR = 1e-3


class LowResCenter(NamedTuple):
    """Palm center quantized to the feature grid."""

    x: int
    y: int


@dataclass(frozen=True)
class TargetSet:
    """Everything a single training sample is supervised with."""

    heatmap: np.ndarray          # (1, H, W), one pixel exactly 1.0
    size: tuple[float, float]    # (w, h) pixels
    disparity: tuple[float, float]
    theta: float                 # radians
    sign: tuple[int, int]        # (1,0) if theta > 0 else (0,1)
    center: LowResCenter


def lowres_center(box: RotatedBox, stride: int, grid_hw: tuple[int, int]) -> LowResCenter:
    """Floor-divide the box center down to the feature grid."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = grid_hw
    cx = int(math.floor(box.x_c / stride))
    cy = int(math.floor(box.y_c / stride))
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(
            f"box center ({box.x_c}, {box.y_c}) falls outside the {w}x{h} feature grid"
        )
    return LowResCenter(cx, cy)


def shift_radius(w: float, h: float) -> int | None:
    """Largest integer r such that the box shifted diagonally by (r, r)
    keeps axis-aligned IoU >= MIN_OVERLAP with itself.

    Sizes are in feature-grid units. Returns None for degenerate boxes,
    where no shift satisfies the overlap condition.
    """
    if w <= 0 or h <= 0:
        return None
    # IoU(r) >= o  <=>  (w-r)(h-r) >= 2o/(1+o) * wh, a quadratic in r whose
    # smaller root bounds the admissible shifts.
    o = MIN_OVERLAP
    k = (1 - o) / (1 + o)
    s = w + h
    disc = s * s - 4 * w * h * k
    r = (s - math.sqrt(disc)) / 2
    return int(math.floor(r + 1e-12))


def adaptive_sigma(w: float, h: float, stride: int) -> float:
    """Heatmap standard deviation (2r+1)/6 from the shift radius of the
    box at feature-grid scale, floored at SIGMA_FLOOR."""
    r = shift_radius(w / stride, h / stride)
    if r is None:
        return SIGMA_FLOOR
    return max(SIGMA_FLOOR, (2 * r + 1) / 6)


def gaussian_heatmap(center: LowResCenter, sigma: float, grid_hw: tuple[int, int]) -> np.ndarray:
    """Dense Gaussian splat, exactly 1.0 at the center pixel, shape (1, H, W)."""
    h, w = grid_hw
    if not (0 <= center.x < w and 0 <= center.y < h):
        raise ValueError(f"center {center} outside {w}x{h} grid")
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - center.x) ** 2 + (ys - center.y) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))[None]


def make_targets(
    box: RotatedBox,
    disparity: Disparity | tuple[int, int],
    stride: int,
    grid_hw: tuple[int, int],
) -> TargetSet:
    """Assemble the full target set for one annotated sample."""
    center = lowres_center(box, stride, grid_hw)
    sigma = adaptive_sigma(box.w, box.h, stride)
    heat = gaussian_heatmap(center, sigma, grid_hw)
    c1 = 1 if box.theta > 0 else 0
    return TargetSet(
        heatmap=heat,
        size=(box.w, box.h),
        disparity=(float(disparity[0]), float(disparity[1])),
        theta=box.theta,
        sign=(c1, 1 - c1),
        center=center,
    )


def corner_heatmaps(box: RotatedBox, stride: int, grid_hw: tuple[int, int]) -> np.ndarray:
    """Four-channel corner target for the keypoint-detection baseline.

    One Gaussian per box corner, in the corner order of
    :func:`palmpipe.core.box_corners`; overlapping splats take the
    per-pixel maximum.
    """
    from palmpipe.core import box_corners

    h, w = grid_hw
    sigma = adaptive_sigma(box.w, box.h, stride)
    ys, xs = np.mgrid[0:h, 0:w]
    maps = np.zeros((4, h, w))
    for i, (cx, cy) in enumerate(box_corners(box)):
        gx = int(math.floor(cx / stride))
        gy = int(math.floor(cy / stride))
        if not (0 <= gx < w and 0 <= gy < h):
            raise ValueError(f"box corner ({cx:.1f}, {cy:.1f}) outside the feature grid")
        d2 = (xs - gx) ** 2 + (ys - gy) ** 2
        maps[i] = np.maximum(maps[i], np.exp(-d2 / (2.0 * sigma * sigma)))
    return maps
