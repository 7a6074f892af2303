"""Independent brute-force oracles used to cross-check the fast paths.

Everything here is written as plainly as possible (loops, direct
definitions) and shares no code with the implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np

from palmpipe.core import RotatedBox


def raster_iou(a: RotatedBox, b: RotatedBox, grid: int = 1000) -> float:
    """IoU by point-in-box counting on a dense grid over both boxes."""

    def half_extents(box):
        rx = (box.w / 2) * abs(math.cos(box.theta)) + (box.h / 2) * abs(math.sin(box.theta))
        ry = (box.w / 2) * abs(math.sin(box.theta)) + (box.h / 2) * abs(math.cos(box.theta))
        return rx, ry

    ax, ay = half_extents(a)
    bx, by = half_extents(b)
    x0 = min(a.x_c - ax, b.x_c - bx)
    x1 = max(a.x_c + ax, b.x_c + bx)
    y0 = min(a.y_c - ay, b.y_c - by)
    y1 = max(a.y_c + ay, b.y_c + by)
    xs = np.linspace(x0, x1, grid)
    ys = np.linspace(y0, y1, grid)
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        dx, dy = gx - box.x_c, gy - box.y_c
        c, s = math.cos(box.theta), math.sin(box.theta)
        # box-frame coordinates: inverse rotation of the offset
        u = c * dx - s * dy
        v = s * dx + c * dy
        return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)

    ia, ib = inside(a), inside(b)
    inter = np.count_nonzero(ia & ib)
    union = np.count_nonzero(ia | ib)
    return inter / union if union else 0.0


def otsu_threshold_scan(hist) -> int:
    """Exhaustive between-class-variance maximization over a 256-bin
    histogram; ties keep the smallest threshold."""
    best_t, best_var = -1, -1.0
    total = sum(hist)
    total_sum = sum(i * h for i, h in enumerate(hist))
    for t in range(255):
        w0 = sum(hist[: t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = sum(i * hist[i] for i in range(t + 1)) / w0
        mu1 = (total_sum - sum(i * hist[i] for i in range(t + 1))) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    return best_t


def eer_threshold_scan(genuine, impostor) -> float:
    """EER by scanning every distinct score and interpolating the crossing
    of the two rates in value space."""
    gen = sorted(float(g) for g in genuine)
    imp = sorted(float(i) for i in impostor)
    points = [(0.0, 1.0)]
    for t in sorted(set(gen + imp)):
        fa = sum(1 for x in imp if x <= t) / len(imp)
        fr = sum(1 for x in gen if x > t) / len(gen)
        points.append((fa, fr))
    for k in range(len(points)):
        fa2, fr2 = points[k]
        if fa2 - fr2 >= 0.0:
            if fa2 - fr2 == 0.0:
                return fa2
            fa1, fr1 = points[k - 1]
            s = (fr1 - fa1) / ((fa2 - fa1) - (fr2 - fr1))
            return fa1 + (fa2 - fa1) * s
    return 1.0


def shift_radius_search(w: float, h: float, min_overlap: float = 0.7):
    """Largest integer diagonal shift keeping axis-aligned IoU >= the
    overlap bound, by direct rectangle-overlap evaluation."""
    if w <= 0 or h <= 0:
        return None
    best = None
    r = 0
    while r <= int(math.ceil(max(w, h))) + 1:
        ix = max(0.0, min(w, w + r) - max(0.0, r))
        iy = max(0.0, min(h, h + r) - max(0.0, r))
        inter = ix * iy
        union = 2 * w * h - inter
        iou = inter / union if union > 0 else 0.0
        if iou >= min_overlap:
            best = r
        else:
            break
        r += 1
    return best


def push_mask(mask: np.ndarray, d: tuple[int, int]) -> np.ndarray:
    """Move mask content by +d with zero fill (independent of the package's
    translate helper)."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            ny, nx = y + d[1], x + d[0]
            if 0 <= ny < h and 0 <= nx < w and mask[y, x]:
                out[ny, nx] = True
    return out
