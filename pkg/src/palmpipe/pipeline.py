"""End-to-end inference and evaluation against the test-to-register
protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from palmpipe import nets, roi
from palmpipe.core import Disparity, RotatedBox
from palmpipe.data import Dataset
from palmpipe.metrics import (
    protocol_scores,
    roc_and_eer,
    rotated_iou,
    write_metrics_json,
    write_roc_csv,
)
from palmpipe.nets import ModelState
from palmpipe.train import _predicted_box


@dataclass(frozen=True)
class InferResult:
    box: RotatedBox
    disparity: Disparity
    embedding: np.ndarray


def infer(
    state: ModelState,
    rgb: np.ndarray,
    ir: np.ndarray | None,
    mode: str = "rgb+ir",
    roi_source: str = "predicted",
    gt_box: RotatedBox | None = None,
    gt_disparity: tuple[int, int] | None = None,
) -> InferResult:
    """Full forward pass: detection, ROI extraction, fusion, embedding.

    The returned box and disparity are always the predictions;
    ``roi_source='gt'`` only switches which geometry feeds the ROI crop.
    """
    if mode not in ("rgb", "rgb+ir"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = state.config
    f, _ = nets.backbone_forward(state, rgb)
    heads, _ = nets.heads_forward(state, f)
    box, disp = _predicted_box(state, heads, rgb.shape[:2])

    if roi_source == "gt":
        if gt_box is None or gt_disparity is None:
            raise ValueError("gt roi source requires gt_box and gt_disparity")
        use_box, use_disp = gt_box, gt_disparity
    elif roi_source == "predicted":
        use_box, use_disp = box, disp
    else:
        raise ValueError(f"unknown roi source {roi_source!r}")

    p_roi, _ = roi.extract_palmprint_roi(f, use_box, (cfg.roi_grid, cfg.roi_grid), cfg.stride)
    vein = None
    if mode == "rgb+ir":
        if ir is None:
            raise ValueError("rgb+ir mode requires the IR image")
        vein = roi.extract_vein_roi(ir, use_box, use_disp, (cfg.vein_px, cfg.vein_px))
    emb, _ = nets.fnet_forward(state, p_roi, vein)
    return InferResult(box=box, disparity=Disparity(*disp), embedding=emb)


def evaluate(
    state: ModelState,
    dataset: Dataset,
    mode: str = "rgb+ir",
    roi_source: str = "predicted",
    roc_path=None,
    metrics_path=None,
) -> dict:
    """Detection IoU plus Rank-1/EER over the enrollment/probe split."""
    test_ids = dataset.enroll_ids + dataset.probe_ids
    embeddings: dict[str, np.ndarray] = {}
    ious = []
    for sid in test_ids:
        rec = dataset.by_id[sid]
        res = infer(
            state,
            dataset.load_rgb(sid),
            dataset.load_ir(sid),
            mode=mode,
            roi_source=roi_source,
            gt_box=rec.box,
            gt_disparity=rec.disparity,
        )
        embeddings[sid] = res.embedding
        ious.append(rotated_iou(res.box, rec.box))

    gallery: dict[int, list[np.ndarray]] = {}
    for sid in dataset.enroll_ids:
        gallery.setdefault(dataset.by_id[sid].label, []).append(embeddings[sid])
    probes = [(embeddings[sid], dataset.by_id[sid].label) for sid in dataset.probe_ids]
    scores, rank1 = protocol_scores(gallery, probes)
    curve, eer = roc_and_eer(scores)

    metrics = {
        "iou_mean": float(np.mean(ious)),
        "iou_median": float(np.median(ious)),
        "rank1": rank1,
        "eer": eer,
        "mode": mode,
        "roi_source": roi_source,
    }
    if roc_path:
        write_roc_csv(roc_path, curve)
    if metrics_path:
        write_metrics_json(metrics_path, metrics)
    return metrics
