"""Detection and verification metrics.

Rotated-box IoU by convex polygon clipping, cosine match distances, the
4-enrollment test-to-register protocol, and ROC/EER with interpolation at
the crossing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from palmpipe.core import RotatedBox, box_corners


@dataclass(frozen=True)
class ScoreSet:
    genuine: np.ndarray   # distances of probes to their own class
    impostor: np.ndarray  # distances of probes to every other class


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex ``clip`` polygon."""
    # Ensure counter-clockwise clip winding so the inside test is uniform.
    x, y = clip[:, 0], clip[:, 1]
    if np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) < 0:
        clip = clip[::-1]

    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        pts, out = out, []
        if not pts:
            break

        def side(p):
            # cross(edge, p - a); >= 0 is inside for counter-clockwise winding
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        for j, p in enumerate(pts):
            q = pts[(j + 1) % len(pts)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp < 0) != (sq < 0) and sp != sq:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out) if out else np.zeros((0, 2))


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    """Intersection over union of two rotated boxes, by exact clipping."""
    # Canonical argument order makes the computation literally symmetric.
    ka = (a.x_c, a.y_c, a.w, a.h, a.theta)
    kb = (b.x_c, b.y_c, b.w, b.h, b.theta)
    if kb < ka:
        a, b = b, a
    ca, cb = box_corners(a), box_corners(b)
    inter_poly = _clip_polygon(ca, cb)
    inter = _polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def match_distance(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine distance 1 - cos(e1, e2), in [0, 2]."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("zero embedding")
    return float(1.0 - np.dot(e1, e2) / (n1 * n2))


def protocol_scores(
    gallery: dict[int, list[np.ndarray]],
    probes: list[tuple[np.ndarray, int]],
) -> tuple[ScoreSet, float]:
    """Test-to-register matching: min distance over 4 enrollments per class.

    Returns genuine/impostor score sets and Rank-1 accuracy (argmin class,
    ties resolved to the lowest class id).
    """
    for cls, embs in gallery.items():
        if len(embs) != 4:
            raise ValueError(f"class {cls} has {len(embs)} enrollments, expected 4")
    class_ids = sorted(gallery)
    genuine, impostor = [], []
    correct = 0
    for emb, label in probes:
        if label not in gallery:
            raise ValueError(f"probe label {label} not enrolled")
        best_cls, best_d = None, None
        for cls in class_ids:
            d = min(match_distance(emb, g) for g in gallery[cls])
            if cls == label:
                genuine.append(d)
            else:
                impostor.append(d)
            if best_d is None or d < best_d:
                best_cls, best_d = cls, d
        if best_cls == label:
            correct += 1
    if not probes:
        raise ValueError("no probes")
    return (
        ScoreSet(genuine=np.array(genuine), impostor=np.array(impostor)),
        correct / len(probes),
    )


def roc_and_eer(scores: ScoreSet) -> tuple[list[tuple[float, float, float]], float]:
    """ROC samples at every distinct distance plus the interpolated EER.

    FAR(t) is the impostor fraction accepted at threshold t (distance <= t)
    and FRR(t) the genuine fraction rejected (distance > t). The EER is
    read at the FAR = FRR crossing, interpolating the two rates linearly
    between adjacent thresholds.
    """
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(scores.impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("both genuine and impostor scores are required")

    thresholds = np.unique(np.concatenate([gen, imp]))
    far = np.searchsorted(imp, thresholds, side="right") / imp.size
    frr = 1.0 - np.searchsorted(gen, thresholds, side="right") / gen.size
    curve = [(float(t), float(fa), float(fr)) for t, fa, fr in zip(thresholds, far, frr)]

    # Crossing search including the pre-threshold state (FAR 0, FRR 1).
    fa_seq = np.concatenate([[0.0], far])
    fr_seq = np.concatenate([[1.0], frr])
    diff = fa_seq - fr_seq
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        eer = fa_seq[idx]
    else:
        fa1, fa2 = fa_seq[idx - 1], fa_seq[idx]
        fr1, fr2 = fr_seq[idx - 1], fr_seq[idx]
        s = (fr1 - fa1) / ((fa2 - fa1) - (fr2 - fr1))
        eer = fa1 + (fa2 - fa1) * s
    return curve, float(eer)


def write_roc_csv(path, curve: list[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "far", "frr"])
        for t, fa, fr in curve:
            writer.writerow([repr(t), repr(fa), repr(fr)])


def write_metrics_json(path, metrics: dict) -> None:
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
