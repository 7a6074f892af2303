"""Training losses with analytic gradients.

Focal center loss over the full heatmap, L1 regression read at the center
pixel (size and disparity share it), the two-bin rotation loss, the
angular-margin embedding loss, and their weighted total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from palmpipe.targets import LowResCenter


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0


@dataclass(frozen=True)
class RotationPrediction:
    """Rotation head output at the center pixel: two logits, two angles."""

    l1: float
    l2: float
    theta1: float
    theta2: float


@dataclass
class ArcMarginParams:
    """Scale, angular margin and the class-weight matrix (rows ~ classes).

    Rows are kept unit-norm by the training loop; the loss itself
    normalizes explicitly so its gradients are exact for any nonzero rows.
    """

    s: float = 30.0
    m: float = 0.5
    weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass(frozen=True)
class LossWeights:
    mu: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 0.1


def focal_loss(
    yhat: np.ndarray, y: np.ndarray, p: FocalParams = FocalParams()
) -> tuple[float, np.ndarray]:
    """Pixel-wise focal loss over the center heatmap, summed (not averaged).

    Positive pixels are exactly y == 1; everywhere else the Gaussian tail
    value damps the penalty by (1-y)^beta. ``yhat`` must lie strictly
    inside (0, 1).
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    if np.any(yhat <= 0.0) or np.any(yhat >= 1.0):
        raise ValueError("predicted heatmap must lie strictly inside (0, 1)")

    pos = y == 1.0
    one_m = 1.0 - yhat
    log_yh = np.log(yhat)
    log_om = np.log(one_m)

    pos_term = one_m**p.alpha * log_yh
    neg_term = (1.0 - y) ** p.beta * yhat**p.alpha * log_om
    loss = -np.sum(np.where(pos, pos_term, neg_term))

    grad_pos = p.alpha * one_m ** (p.alpha - 1) * log_yh - one_m**p.alpha / yhat
    grad_neg = -((1.0 - y) ** p.beta) * (
        p.alpha * yhat ** (p.alpha - 1) * log_om - yhat**p.alpha / one_m
    )
    grad = np.where(pos, grad_pos, grad_neg)
    return float(loss), grad


def l1_at_center(
    pred: np.ndarray, target: tuple[float, float], center: LowResCenter
) -> tuple[float, np.ndarray]:
    """L1 loss of a 2-channel map read only at the center pixel.

    The gradient map is zero except at that pixel, where it is the sign of
    the residual (0 at ties).
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) map, got {pred.shape}")
    _, h, w = pred.shape
    if not (0 <= center.x < w and 0 <= center.y < h):
        raise ValueError(f"center {center} outside {w}x{h} grid")
    res = pred[:, center.y, center.x] - np.asarray(target, dtype=np.float64)
    grad = np.zeros_like(pred)
    grad[:, center.y, center.x] = np.sign(res)
    return float(np.sum(np.abs(res))), grad


def rotation_loss(r: RotationPrediction, theta: float) -> tuple[float, np.ndarray]:
    """Two-way orientation classification plus gated angular L1.

    Bin 1 is the target when theta > 0, bin 2 otherwise; only the target
    bin's angle is pulled toward theta. The gradient is ordered
    (l1, l2, theta1, theta2).
    """
    b = 0 if theta > 0 else 1
    logits = np.array([r.l1, r.l2], dtype=np.float64)
    zmax = logits.max()
    expz = np.exp(logits - zmax)
    p = expz / expz.sum()
    ce = -logits[b] + zmax + math.log(expz.sum())

    angles = np.array([r.theta1, r.theta2], dtype=np.float64)
    ang = abs(angles[b] - theta)

    grad = np.zeros(4)
    grad[:2] = p
    grad[b] -= 1.0
    grad[2 + b] = np.sign(angles[b] - theta)
    return float(ce + ang), grad


def arc_margin_loss(
    embedding: np.ndarray, label: int, params: ArcMarginParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """Angular-margin softmax loss on the embedding.

    The target logit gets cos(eta_y + m) where eta_y is the angle to its
    class row; non-target logits use the plain cosine. Returns the loss
    and gradients wrt the embedding and the weight rows.
    """
    e = np.asarray(embedding, dtype=np.float64)
    w = np.asarray(params.weights, dtype=np.float64)
    n, d = w.shape
    if e.shape != (d,):
        raise ValueError(f"embedding shape {e.shape} does not match weights {w.shape}")
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    ne = np.linalg.norm(e)
    if ne == 0.0:
        raise ValueError("zero embedding")
    nw = np.linalg.norm(w, axis=1)
    if np.any(nw == 0.0):
        raise ValueError("zero weight row")

    cos = (w @ e) / (nw * ne)
    cy = cos[label]
    sin_y = math.sqrt(max(0.0, 1.0 - cy * cy))
    phi = cy * math.cos(params.m) - sin_y * math.sin(params.m)
    # the derivative denominator alone is guarded so exact-alignment values
    # stay untouched (m = 0 reduces to plain softmax bitwise)
    dphi_dcy = math.cos(params.m) + cy * math.sin(params.m) / max(sin_y, 1e-7)

    z = params.s * cos
    z[label] = params.s * phi
    zmax = z.max()
    expz = np.exp(z - zmax)
    p = expz / expz.sum()
    loss = -z[label] + zmax + math.log(expz.sum())

    dz = p.copy()
    dz[label] -= 1.0
    dcos = dz * params.s
    dcos[label] *= dphi_dcy

    # d cos_j / dE = w_j/(|w_j||E|) - cos_j E/|E|^2 ; same form for rows.
    grad_e = (dcos / nw) @ w / ne - (dcos @ cos) * e / ne**2
    grad_w = np.outer(dcos / (nw * ne), e) - (dcos * cos / nw**2)[:, None] * w
    return float(loss), grad_e, grad_w


def total_loss(
    l_c: float, l_r: float, l_s: float, l_d: float, l_arc: float, w: LossWeights = LossWeights()
) -> float:
    """Weighted sum of the five component losses."""
    parts = np.array([l_c, l_r, l_s, l_d, l_arc], dtype=np.float64)
    if not np.all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss components: {parts}")
    return float(l_c + w.lambda1 * l_r + w.lambda2 * (l_s + l_d) + w.mu * l_arc)
