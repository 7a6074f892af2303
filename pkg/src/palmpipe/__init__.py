"""Bimodal palmprint pipeline: detection targets, losses, ROI extraction,
classical alignment, cross-modal fusion, nets, metrics and a synthetic
end-to-end experiment harness."""

from palmpipe.core import (
    Disparity,
    RotatedBox,
    affine_matrix,
    affine_warp,
    bilinear_sample,
    box_corners,
)

__all__ = [
    "Disparity",
    "RotatedBox",
    "affine_matrix",
    "affine_warp",
    "bilinear_sample",
    "box_corners",
]
