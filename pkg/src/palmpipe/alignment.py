"""Classical ground-truth disparity pipeline.

Skin-statistics palm segmentation of the RGB image, OTSU binarization of
the IR image, and an exhaustive integer translation search that maximizes
mask intersection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from palmpipe.core import RotatedBox, image_to_tensor
from palmpipe.roi import extract_palmprint_roi

SIGMA_FLOOR = 0.5  # intensity units; keeps flat synthetic palms segmentable
MORPH_SIZE = 5

DEFAULT_SEARCH_RANGE = 32


@dataclass(frozen=True)
class SkinModel:
    """Per-channel mean and standard deviation of the ROI crop, 8-bit units."""

    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)


def skin_model_from_roi(rgb: np.ndarray, box: RotatedBox) -> SkinModel:
    """Fit channel statistics on the rotated ROI crop of the RGB image."""
    out_h, out_w = int(round(box.h)), int(round(box.w))
    if out_h < 1 or out_w < 1:
        raise ValueError("empty ROI")
    t = image_to_tensor(rgb) * 255.0
    crop, _ = extract_palmprint_roi(t, box, (out_h, out_w), stride=1, sampling_ratio=1)
    mean = crop.reshape(3, -1).mean(axis=1)
    std = np.maximum(crop.reshape(3, -1).std(axis=1), SIGMA_FLOOR)
    return SkinModel(mean=mean, std=std)


def segment_palm_rgb(rgb: np.ndarray, gt_box: RotatedBox) -> np.ndarray:
    """Hand mask from per-channel skin statistics of the annotated ROI.

    A pixel is kept iff every channel lies strictly inside mean +- 3 std,
    then the mask is dilated and eroded once with a 5x5 square element.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    model = skin_model_from_roi(rgb, gt_box)
    p = rgb.astype(np.float64)
    lo = model.mean - 3.0 * model.std
    hi = model.mean + 3.0 * model.std
    mask = np.all((p > lo) & (p < hi), axis=2)
    elem = np.ones((MORPH_SIZE, MORPH_SIZE), dtype=bool)
    mask = ndimage.binary_dilation(mask, structure=elem)
    mask = ndimage.binary_erosion(mask, structure=elem)
    return mask


def otsu_binarize(ir: np.ndarray) -> np.ndarray:
    """Threshold maximizing between-class variance; mask is intensity > t*.

    Ties pick the smallest threshold. A single-valued image has no
    between-class split and raises.
    """
    ir = np.asarray(ir)
    if ir.ndim != 2 or ir.size == 0:
        raise ValueError("expected a nonempty gray image")
    hist = np.bincount(ir.astype(np.uint8).ravel(), minlength=256).astype(np.int64)
    if np.count_nonzero(hist) < 2:
        raise ValueError("degenerate single-valued histogram")

    counts = np.cumsum(hist)
    sums = np.cumsum(hist * np.arange(256, dtype=np.int64))
    total, total_sum = counts[-1], sums[-1]

    best_t, best_var = -1, -1.0
    for t in range(255):
        w0 = counts[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = sums[t] / w0
        mu1 = (total_sum - sums[t]) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    return ir > best_t


def find_disparity(
    m_rgb: np.ndarray, m_ir: np.ndarray, search_range: int = DEFAULT_SEARCH_RANGE
) -> tuple[int, int]:
    """Exhaustive integer translation maximizing mask intersection.

    Returns the displacement of the IR mask content relative to the RGB
    mask, i.e. the d for which translate_image(m_ir, d) best overlaps
    m_rgb. Ties prefer the smallest |d_x| + |d_y|, then lexicographic
    (d_x, d_y).
    """
    a = np.asarray(m_rgb, dtype=bool)
    b = np.asarray(m_ir, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("empty mask")
    if search_range < 0:
        raise ValueError("search range must be >= 0")

    h, w = a.shape
    best = (0, 0)
    best_key = None
    for dy in range(-search_range, search_range + 1):
        ya0, ya1 = max(0, -dy), min(h, h - dy)
        if ya0 >= ya1:
            continue
        for dx in range(-search_range, search_range + 1):
            xa0, xa1 = max(0, -dx), min(w, w - dx)
            if xa0 >= xa1:
                continue
            inter = np.count_nonzero(
                a[ya0:ya1, xa0:xa1] & b[ya0 + dy : ya1 + dy, xa0 + dx : xa1 + dx]
            )
            key = (-inter, abs(dx) + abs(dy), dx, dy)
            if best_key is None or key < best_key:
                best_key, best = key, (dx, dy)
    return best
