"""Rotated-box decoding from head outputs and ROI extraction.

The palmprint ROI is cut from the backbone feature map by rotating the
map about the predicted center and then crop-resizing the axis-aligned
window, all through bilinear sampling so gradients reach the features.
The palm-vein ROI applies the same geometry to the translated IR image.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from palmpipe.core import (
    RotatedBox,
    affine_matrix,
    bilinear_weights,
    check_tensor,
)


def peak_cell(yhat: np.ndarray) -> tuple[int, int]:
    """Row-major argmax of a (1, H, W) or (H, W) heatmap as (x, y)."""
    arr = np.asarray(yhat)
    if arr.ndim == 3:
        arr = arr[0]
    flat = int(np.argmax(arr))
    h, w = arr.shape
    return flat % w, flat // w


def decode_box(
    yhat: np.ndarray, shat: np.ndarray, rhat: np.ndarray, stride: int
) -> RotatedBox:
    """Read the predicted box off the head maps at the heatmap peak.

    Center is the peak cell scaled back by the output stride (ties break
    to the lowest row-major index); sizes come from the size map at that
    cell; the angle is the one of the two rotation-head angles whose
    orientation logit wins.
    """
    cx, cy = peak_cell(yhat)
    w, h = np.asarray(shat)[:, cy, cx]
    l1, l2, t1, t2 = np.asarray(rhat)[:, cy, cx]
    theta = t1 if l1 >= l2 else t2
    return RotatedBox(float(stride * cx), float(stride * cy), float(w), float(h), float(theta))


def clamp_box(
    x_c: float, y_c: float, w: float, h: float, theta: float,
    image_hw: tuple[int, int], min_size: float = 32.0,
) -> RotatedBox:
    """Sanitize raw decoded values into a valid box inside the image.

    Raw head outputs early in training can be degenerate; the training
    and inference paths clamp before feeding the ROI extractor.
    """
    ih, iw = image_hw
    w = float(min(max(w, min_size), iw))
    h = float(min(max(h, min_size), ih))
    x_c = float(min(max(x_c, 0.0), iw - 1))
    y_c = float(min(max(y_c, 0.0), ih - 1))
    lim = math.pi / 2
    theta = float(min(max(theta, -lim + 1e-6), lim))
    return RotatedBox(x_c, y_c, w, h, theta)


def _roi_sample_points(
    center: tuple[float, float],
    size: tuple[float, float],
    out_hw: tuple[int, int],
    ratio: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample coordinates (ratio*h_o, ratio*w_o) over the axis-aligned window.

    Each output bin holds a ratio x ratio grid of regularly spaced points
    (half-sample offsets, so ratio=1 samples bin centers).
    """
    h_o, w_o = out_hw
    cx, cy = center
    w, h = size
    x0, y0 = cx - w / 2.0, cy - h / 2.0
    bw, bh = w / w_o, h / h_o
    fx = (np.arange(w_o * ratio) + 0.5) / ratio  # bin-fraction positions
    fy = (np.arange(h_o * ratio) + 0.5) / ratio
    xs = x0 + fx * bw
    ys = y0 + fy * bh
    return np.meshgrid(xs, ys)


def extract_palmprint_roi(
    f: np.ndarray,
    box: RotatedBox,
    out_hw: tuple[int, int],
    stride: int,
    sampling_ratio: int = 2,
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Crop the rotated ROI from the feature map, differentiably.

    The box is given at image scale and divided by ``stride`` to match the
    feature grid. The map is first rotated about the (scaled) center, then
    each output bin averages a ``sampling_ratio`` squared grid of bilinear
    samples over the axis-aligned window.

    Returns the (C, h_o, w_o) crop and a function mapping an output
    gradient back to a gradient wrt ``f``.
    """
    f = check_tensor(f)
    c, fh, fw = f.shape
    gx, gy = box.x_c / stride, box.y_c / stride
    gw, gh = box.w / stride, box.h / stride
    if gw < 1.0 or gh < 1.0:
        raise ValueError(f"degenerate box: {gw:.3f}x{gh:.3f} feature cells")

    # The second stage only reads the rotated map inside the axis-aligned
    # window, so the rotation is evaluated on that sub-rectangle alone.
    rx0 = max(0, int(math.floor(gx - gw / 2)) - 2)
    rx1 = min(fw, int(math.ceil(gx + gw / 2)) + 3)
    ry0 = max(0, int(math.floor(gy - gh / 2)) - 2)
    ry1 = min(fh, int(math.ceil(gy + gh / 2)) + 3)
    if rx0 >= rx1 or ry0 >= ry1:
        raise ValueError("ROI window lies fully outside the feature grid")
    rect_h, rect_w = ry1 - ry0, rx1 - rx0

    # Stage 1: rotate about the center (output -> source mapping).
    m = affine_matrix(box.theta, (gx, gy))
    ys, xs = np.mgrid[ry0:ry1, rx0:rx1].astype(np.float64)
    rot_x = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    rot_y = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    rot_corners, rot_masks, rot_wts = bilinear_weights((fh, fw), rot_x, rot_y)
    f_rot = np.zeros((c, rect_h, rect_w))
    for (cx_i, cy_i), msk, wt in zip(rot_corners, rot_masks, rot_wts):
        cxc = np.clip(cx_i, 0, fw - 1)
        cyc = np.clip(cy_i, 0, fh - 1)
        f_rot += f[:, cyc, cxc] * (wt * msk)

    # Stage 2: average the pooled bilinear samples per output bin. Sample
    # coordinates are shifted into the sub-rectangle; its clipped sides
    # coincide with the grid border, preserving zero padding.
    n = sampling_ratio
    sx, sy = _roi_sample_points((gx, gy), (gw, gh), out_hw, n)
    smp_corners, smp_masks, smp_wts = bilinear_weights(
        (rect_h, rect_w), sx - rx0, sy - ry0
    )
    h_o, w_o = out_hw
    samples = np.zeros((c, h_o * n, w_o * n))
    for (cx_i, cy_i), msk, wt in zip(smp_corners, smp_masks, smp_wts):
        cxc = np.clip(cx_i, 0, rect_w - 1)
        cyc = np.clip(cy_i, 0, rect_h - 1)
        samples += f_rot[:, cyc, cxc] * (wt * msk)
    roi = samples.reshape(c, h_o, n, w_o, n).mean(axis=(2, 4))

    def backward(d_roi: np.ndarray) -> np.ndarray:
        d_roi = np.asarray(d_roi, dtype=np.float64)
        if d_roi.shape != roi.shape:
            raise ValueError(f"gradient shape {d_roi.shape} != roi shape {roi.shape}")
        d_samples = np.repeat(np.repeat(d_roi, n, axis=1), n, axis=2) / (n * n)
        d_rot = np.zeros_like(f_rot)
        for (cx_i, cy_i), msk, wt in zip(smp_corners, smp_masks, smp_wts):
            cxc = np.clip(cx_i, 0, rect_w - 1)
            cyc = np.clip(cy_i, 0, rect_h - 1)
            np.add.at(
                d_rot.transpose(1, 2, 0),
                (cyc.ravel(), cxc.ravel()),
                (d_samples * (wt * msk)).reshape(c, -1).T,
            )
        d_f = np.zeros_like(f)
        for (cx_i, cy_i), msk, wt in zip(rot_corners, rot_masks, rot_wts):
            cxc = np.clip(cx_i, 0, fw - 1)
            cyc = np.clip(cy_i, 0, fh - 1)
            np.add.at(
                d_f.transpose(1, 2, 0),
                (cyc.ravel(), cxc.ravel()),
                (d_rot * (wt * msk)).reshape(c, -1).T,
            )
        return d_f

    return roi, backward


def extract_vein_roi(
    ir: np.ndarray,
    box: RotatedBox,
    d: tuple[int, int],
    out_hw: tuple[int, int] = (128, 128),
) -> np.ndarray:
    """Translate the IR image by the disparity, then rotate-and-crop.

    The box is at image scale. Returns a uint8 gray image of ``out_hw``.
    """
    from palmpipe.core import translate_image

    ir = np.asarray(ir)
    if ir.ndim != 2:
        raise ValueError(f"expected a gray (H, W) image, got {ir.shape}")
    h, w = ir.shape
    if abs(int(d[0])) >= w or abs(int(d[1])) >= h:
        raise ValueError(f"disparity {tuple(d)} moves the image fully out of bounds")

    # Axis-aligned reach of the rotated window must touch the image.
    reach_x = (box.w / 2) * abs(math.cos(box.theta)) + (box.h / 2) * abs(math.sin(box.theta))
    reach_y = (box.w / 2) * abs(math.sin(box.theta)) + (box.h / 2) * abs(math.cos(box.theta))
    if (
        box.x_c + reach_x < 0
        or box.x_c - reach_x > w - 1
        or box.y_c + reach_y < 0
        or box.y_c - reach_y > h - 1
    ):
        raise ValueError("ROI lies fully outside the translated image")

    shifted = translate_image(ir, (int(d[0]), int(d[1]))).astype(np.float64)[None]
    # Image-scale crop: one bin-center sample per output pixel is plenty at
    # this resolution; the 2x2-averaged convention matters on the coarse
    # feature grid.
    roi, _ = extract_palmprint_roi(shifted, box, out_hw, stride=1, sampling_ratio=1)
    return np.clip(np.round(roi[0]), 0, 255).astype(np.uint8)
