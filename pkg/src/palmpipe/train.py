"""Two-stage training loop.

Stage I trains only the detection network (backbone + heads). Stage II
turns on the embedding loss and feeds the predicted ROIs through the
fusion net, with gradients flowing back into the backbone feature via the
differentiable crop; the decoded box parameters themselves are treated as
constants within a step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from palmpipe import losses, nets, roi
from palmpipe.data import Dataset
from palmpipe.losses import ArcMarginParams, LossWeights, RotationPrediction
from palmpipe.metrics import rotated_iou
from palmpipe.nets import ModelConfig, ModelState
from palmpipe.targets import TargetSet, make_targets


@dataclass
class TrainConfig:
    stage1_epochs: int = 15
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "rgb+ir"     # rgb trains without the vein branch
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs > self.epochs:
            raise ValueError("stage1_epochs must not exceed total epochs")


def _accumulate(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for k, v in part.items():
        if k in total:
            total[k] += v
        else:
            total[k] = v.copy()


def _detection_losses(
    state: ModelState, heads: dict, target: TargetSet, w: LossWeights
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Stage-agnostic detection losses and weighted head-map gradients."""
    c = target.center
    l_c, d_yhat = losses.focal_loss(heads["yhat"], target.heatmap)
    l_s, d_size = losses.l1_at_center(heads["size"], target.size, c)
    l_d, d_disp = losses.l1_at_center(heads["disp"], target.disparity, c)
    rot_at = RotationPrediction(*heads["rot"][:, c.y, c.x])
    l_r, rot_grad = losses.rotation_loss(rot_at, target.theta)
    d_rot = np.zeros_like(heads["rot"])
    d_rot[:, c.y, c.x] = rot_grad

    d_maps = {
        "center": nets.sigmoid_backward(d_yhat, heads["yhat"]),
        "size": w.lambda2 * d_size,
        "disp": w.lambda2 * d_disp,
        "rot": w.lambda1 * d_rot,
    }
    return {"loss_c": l_c, "loss_r": l_r, "loss_s": l_s, "loss_d": l_d}, d_maps


def _predicted_box(
    state: ModelState, heads: dict, image_hw: tuple[int, int]
) -> tuple[roi.RotatedBox, tuple[int, int]]:
    """Clamped decode of box and disparity for the downstream ROI feed."""
    stride = state.config.stride
    cx, cy = roi.peak_cell(heads["yhat"])
    w, h = heads["size"][:, cy, cx]
    l1, l2, t1, t2 = heads["rot"][:, cy, cx]
    theta = t1 if l1 >= l2 else t2
    box = roi.clamp_box(stride * cx, stride * cy, w, h, theta, image_hw)
    dmax = image_hw[1] // 8
    dx, dy = heads["disp"][:, cy, cx]
    disp = (
        int(np.clip(round(float(dx)), -dmax, dmax)),
        int(np.clip(round(float(dy)), -dmax, dmax)),
    )
    return box, disp


def train_step(
    state: ModelState,
    rgb: np.ndarray,
    ir: np.ndarray | None,
    target: TargetSet,
    label: int,
    stage: int,
    cfg: TrainConfig,
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Forward + backward for one sample; returns losses and param grads."""
    w = cfg.loss_weights
    f, bb_cache = nets.backbone_forward(state, rgb)
    heads, h_cache = nets.heads_forward(state, f)
    loss_parts, d_maps = _detection_losses(state, heads, target, w)

    grads: dict[str, np.ndarray] = {}
    d_f_extra = None
    if stage >= 2:
        mcfg = state.config
        box, disp = _predicted_box(state, heads, rgb.shape[:2])
        p_roi, roi_back = roi.extract_palmprint_roi(
            f, box, (mcfg.roi_grid, mcfg.roi_grid), mcfg.stride
        )
        vein = None
        if cfg.mode == "rgb+ir":
            vein = roi.extract_vein_roi(ir, box, disp, (mcfg.vein_px, mcfg.vein_px))
        emb, f_cache = nets.fnet_forward(state, p_roi, vein)
        arc = ArcMarginParams(mcfg.arc_s, mcfg.arc_m, state.params["arc.w"])
        l_arc, d_emb, d_arc_w = losses.arc_margin_loss(emb, label, arc)
        loss_parts["loss_arc"] = l_arc
        d_p_roi, fnet_grads = nets.fnet_backward(state, f_cache, w.mu * d_emb)
        _accumulate(grads, fnet_grads)
        grads["arc.w"] = w.mu * d_arc_w
        d_f_extra = roi_back(d_p_roi)
    else:
        loss_parts["loss_arc"] = 0.0

    d_f, head_grads = nets.heads_backward(state, h_cache, d_maps)
    if d_f_extra is not None:
        d_f = d_f + d_f_extra
    _accumulate(grads, head_grads)
    bb_grads, _ = nets.backbone_backward(state, bb_cache, d_f)
    _accumulate(grads, bb_grads)

    mu = w.mu if stage >= 2 else 0.0
    loss_parts["loss_total"] = losses.total_loss(
        loss_parts["loss_c"], loss_parts["loss_r"], loss_parts["loss_s"],
        loss_parts["loss_d"], loss_parts["loss_arc"],
        LossWeights(mu=mu, lambda1=w.lambda1, lambda2=w.lambda2),
    )
    return loss_parts, grads


def detection_iou(state: ModelState, dataset: Dataset, ids: list[str]) -> list[float]:
    """Predicted-box IoU against ground truth over the given samples."""
    ious = []
    for sid in ids:
        rec = dataset.by_id[sid]
        rgb = dataset.load_rgb(sid)
        f, _ = nets.backbone_forward(state, rgb)
        heads, _ = nets.heads_forward(state, f)
        box, _ = _predicted_box(state, heads, rgb.shape[:2])
        ious.append(rotated_iou(box, rec.box))
    return ious


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    log_path=None,
) -> tuple[ModelState, list[dict]]:
    """Train on the dataset's train split; returns the state and history.

    History carries per-epoch mean losses; validation IoU on the test
    images is recorded at the stage boundary and at the end. Appends one
    JSON line per epoch to ``log_path`` when given.
    """
    n_classes = max(r.label for r in dataset.records) + 1
    if model_cfg is None:
        model_cfg = ModelConfig(n_classes=n_classes)
    state = nets.init_model(model_cfg, cfg.seed)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    train_ids = list(dataset.train_ids)
    images = {sid: (dataset.load_rgb(sid), dataset.load_ir(sid)) for sid in train_ids}
    grid = None
    targets: dict[str, TargetSet] = {}
    for sid in train_ids:
        rec = dataset.by_id[sid]
        h, w_img = images[sid][0].shape[:2]
        grid = (h // model_cfg.stride, w_img // model_cfg.stride)
        targets[sid] = make_targets(rec.box, rec.disparity, model_cfg.stride, grid)

    val_ids = dataset.enroll_ids + dataset.probe_ids
    history: list[dict] = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            stage = 1 if epoch < cfg.stage1_epochs else 2
            lr = nets.cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
            order = shuffle_rng.permutation(len(train_ids))
            sums: dict[str, float] = {}
            n_seen = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                grads: dict[str, np.ndarray] = {}
                for idx in batch:
                    sid = train_ids[idx]
                    rec = dataset.by_id[sid]
                    rgb, ir = images[sid]
                    parts, g = train_step(state, rgb, ir, targets[sid], rec.label, stage, cfg)
                    if not math.isfinite(parts["loss_total"]):
                        raise RuntimeError(
                            f"non-finite loss at epoch {epoch}, sample {sid}: {parts}"
                        )
                    _accumulate(grads, g)
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v
                    n_seen += 1
                for k in grads:
                    grads[k] /= len(batch)
                nets.sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay)
                nets.renormalize_arc_rows(state)

            entry = {"epoch": epoch, "stage": stage, "lr": lr}
            entry.update({k: sums[k] / n_seen for k in sorted(sums)})
            if epoch == cfg.stage1_epochs - 1 or epoch == cfg.epochs - 1:
                ious = detection_iou(state, dataset, val_ids)
                entry["val_iou_median"] = float(np.median(ious))
                entry["val_iou_mean"] = float(np.mean(ious))
            history.append(entry)
            if log_f:
                log_f.write(json.dumps(entry, sort_keys=True) + "\n")
                log_f.flush()
    finally:
        if log_f:
            log_f.close()
    return state, history
