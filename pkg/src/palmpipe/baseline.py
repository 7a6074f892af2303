"""Keypoint-detection baseline for the ROI localization comparison.

Reuses the backbone with a single 4-channel corner head: detect the four
box corners as heatmap peaks, then fit a rotated box to them by least
squares.
"""

from __future__ import annotations

import math

import numpy as np

from palmpipe import losses, nets
from palmpipe.core import RotatedBox
from palmpipe.data import Dataset
from palmpipe.metrics import rotated_iou
from palmpipe.nets import ModelConfig, ModelState
from palmpipe.targets import corner_heatmaps
from palmpipe.train import TrainConfig, _accumulate

# Box-frame corner pattern matching palmpipe.core.box_corners.
_CORNER_PATTERN = np.array(
    [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]
)


def fit_box_to_corners(corners: np.ndarray) -> RotatedBox:
    """Least-squares rotated box through 4 corner points (in pattern order)."""
    corners = np.asarray(corners, dtype=np.float64)
    center = corners.mean(axis=0)
    d = corners - center
    m = d.T @ _CORNER_PATTERN  # = R diag(w, h) since the pattern is orthonormal
    w = float(np.linalg.norm(m[:, 0]))
    h = float(np.linalg.norm(m[:, 1]))
    t1 = math.atan2(-m[1, 0], m[0, 0])
    t2 = math.atan2(m[0, 1], m[1, 1])
    theta = math.atan2(math.sin(t1) + math.sin(t2), math.cos(t1) + math.cos(t2))
    if theta <= -math.pi / 2:
        theta += math.pi
    elif theta > math.pi / 2:
        theta -= math.pi
    return RotatedBox(float(center[0]), float(center[1]), max(w, 1.0), max(h, 1.0), theta)


def decode_corners(corner_prob: np.ndarray, stride: int) -> np.ndarray:
    """Per-channel heatmap peaks mapped to cell centers at image scale."""
    pts = []
    for ch in corner_prob:
        flat = int(np.argmax(ch))
        gy, gx = divmod(flat, ch.shape[1])
        pts.append((stride * gx + stride / 2.0, stride * gy + stride / 2.0))
    return np.array(pts)


def train_keypoint_baseline(
    dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None
) -> ModelState:
    """Train the corner-heatmap variant with the focal loss only."""
    n_classes = max(r.label for r in dataset.records) + 1
    if model_cfg is None:
        model_cfg = ModelConfig(n_classes=n_classes, variant="keypoint")
    state = nets.init_model(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    train_ids = list(dataset.train_ids)
    images = {sid: dataset.load_rgb(sid) for sid in train_ids}
    heat = {}
    for sid in train_ids:
        rec = dataset.by_id[sid]
        h, w = images[sid].shape[:2]
        grid = (h // model_cfg.stride, w // model_cfg.stride)
        heat[sid] = corner_heatmaps(rec.box, model_cfg.stride, grid)

    for epoch in range(cfg.epochs):
        lr = nets.cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = rng.permutation(len(train_ids))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads: dict[str, np.ndarray] = {}
            for idx in batch:
                sid = train_ids[idx]
                f, bb_cache = nets.backbone_forward(state, images[sid])
                heads, h_cache = nets.heads_forward(state, f)
                _, d_prob = losses.focal_loss(heads["corner_prob"], heat[sid])
                d_map = nets.sigmoid_backward(d_prob, heads["corner_prob"])
                d_f, head_grads = nets.heads_backward(state, h_cache, {"corner": d_map})
                bb_grads, _ = nets.backbone_backward(state, bb_cache, d_f)
                _accumulate(grads, head_grads)
                _accumulate(grads, bb_grads)
            for k in grads:
                grads[k] /= len(batch)
            nets.sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay)
    return state


def predict_box_keypoint(state: ModelState, rgb: np.ndarray) -> RotatedBox:
    f, _ = nets.backbone_forward(state, rgb)
    heads, _ = nets.heads_forward(state, f)
    corners = decode_corners(heads["corner_prob"], state.config.stride)
    return fit_box_to_corners(corners)


def eval_keypoint_baseline(state: ModelState, dataset: Dataset) -> dict:
    """Mean/median IoU of corner-fitted boxes over the test images."""
    ious = []
    for sid in dataset.enroll_ids + dataset.probe_ids:
        rec = dataset.by_id[sid]
        box = predict_box_keypoint(state, dataset.load_rgb(sid))
        ious.append(rotated_iou(box, rec.box))
    return {"iou_mean": float(np.mean(ious)), "iou_median": float(np.median(ious))}
