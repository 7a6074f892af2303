"""Built-in verification suite behind the ``selftest`` CLI command.

Runs compact versions of the gradient checks and brute-force oracle
comparisons; prints one line per check and reports overall success.
"""

from __future__ import annotations

import math

import numpy as np

from palmpipe import alignment, losses, metrics, nets, oracles, roi, targets
from palmpipe.core import RotatedBox, affine_matrix
from palmpipe.gradcheck import finite_difference, max_rel_error


def _check(name: str, ok: bool, detail: str = "") -> bool:
    print(f"{'ok  ' if ok else 'FAIL'} {name}" + (f": {detail}" if detail and not ok else ""))
    return ok


def _gradient_checks(rng: np.random.Generator) -> list[bool]:
    results = []

    worst = 0.0
    for _ in range(10):
        y = np.zeros((1, 5, 5))
        y[0, rng.integers(5), rng.integers(5)] = 1.0
        y += rng.uniform(0, 0.5, y.shape) * (y < 1)
        yh = rng.uniform(0.05, 0.95, y.shape)
        _, g = losses.focal_loss(yh, y)
        fd = finite_difference(lambda x: losses.focal_loss(x, y)[0], yh)
        worst = max(worst, max_rel_error(g, fd))
    results.append(_check("focal loss gradient", worst < 1e-4, f"err {worst:.2e}"))

    worst = 0.0
    for _ in range(10):
        x = rng.normal(size=4)
        theta = float(rng.uniform(-0.5, 0.5)) or 0.1
        _, g = losses.rotation_loss(losses.RotationPrediction(*x), theta)
        if abs(x[0 if theta > 0 else 1] + 2 - theta) < 1e-3:
            continue
        fd = finite_difference(
            lambda v: losses.rotation_loss(losses.RotationPrediction(*v), theta)[0], x
        )
        worst = max(worst, max_rel_error(g, fd))
    results.append(_check("rotation loss gradient", worst < 1e-4, f"err {worst:.2e}"))

    worst = 0.0
    for _ in range(10):
        w = rng.normal(size=(4, 8))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        e = rng.normal(size=8)
        p = losses.ArcMarginParams(30.0, 0.5, w)
        _, ge, gw = losses.arc_margin_loss(e, 1, p)
        fd_e = finite_difference(lambda x: losses.arc_margin_loss(x, 1, p)[0], e)
        fd_w = finite_difference(
            lambda x: losses.arc_margin_loss(e, 1, losses.ArcMarginParams(30.0, 0.5, x))[0], w
        )
        worst = max(worst, max_rel_error(ge, fd_e), max_rel_error(gw, fd_w))
    results.append(_check("arc-margin gradient", worst < 1e-4, f"err {worst:.2e}"))

    worst = 0.0
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        x = rng.normal(size=(3, 6, 6))
        layer = nets.ConvLayer(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), stride, pad)
        dy = rng.normal(size=nets.conv2d_forward(x, layer).shape)
        dx, dw, db = nets.conv2d_backward(x, layer, dy)
        fdx = finite_difference(lambda v: float(np.sum(nets.conv2d_forward(v, layer) * dy)), x)
        worst = max(worst, max_rel_error(dx, fdx))
    results.append(_check("conv2d input gradient", worst < 1e-4, f"err {worst:.2e}"))

    worst = 0.0
    for _ in range(2):
        f = rng.normal(size=(3, 8, 8))
        box = RotatedBox(60 + rng.uniform(-8, 8), 64, 72, 64, rng.uniform(-0.4, 0.4))
        r, back = roi.extract_palmprint_roi(f, box, (4, 4), 16)
        d = rng.normal(size=r.shape)
        g = back(d)
        fd = finite_difference(
            lambda v: float(np.sum(roi.extract_palmprint_roi(v, box, (4, 4), 16)[0] * d)), f
        )
        worst = max(worst, max_rel_error(g, fd))
    results.append(_check("roi extraction gradient", worst < 1e-4, f"err {worst:.2e}"))

    from palmpipe import fusion as fus

    p = rng.normal(size=(4, 3, 3))
    v = rng.normal(size=(5, 3, 3))
    res = fus.select_and_fuse(p, v)
    d = rng.normal(size=res.fused.shape)
    dp, dv = fus.select_fuse_backward(res.selection, d, v.shape[0])
    sel = res.selection
    fd_p = finite_difference(lambda x: float(np.sum((x + v[sel]) * d)), p)
    fd_v = finite_difference(lambda x: float(np.sum((p + x[sel]) * d)), v)
    err = max(max_rel_error(dp, fd_p), max_rel_error(dv, fd_v))
    results.append(_check("fusion gradient (selection frozen)", err < 1e-4, f"err {err:.2e}"))
    return results


def _oracle_checks(rng: np.random.Generator) -> list[bool]:
    results = []

    worst = 0.0
    for _ in range(10):
        a = RotatedBox(*rng.uniform(40, 60, 2), *rng.uniform(20, 50, 2), rng.uniform(-1.2, 1.2))
        b = RotatedBox(*rng.uniform(40, 60, 2), *rng.uniform(20, 50, 2), rng.uniform(-1.2, 1.2))
        worst = max(worst, abs(metrics.rotated_iou(a, b) - oracles.raster_iou(a, b, grid=500)))
    results.append(_check("rotated IoU vs rasterization", worst <= 0.01, f"delta {worst:.4f}"))

    ok = True
    for _ in range(20):
        hist = rng.integers(0, 50, 256)
        hist[rng.integers(256)] += 500
        img = np.repeat(np.arange(256, dtype=np.uint8), hist).reshape(1, -1)
        if len(np.unique(img)) < 2:
            continue
        t_oracle = oracles.otsu_threshold_scan(list(hist))
        ok = ok and np.array_equal(alignment.otsu_binarize(img), img > t_oracle)
    results.append(_check("otsu vs exhaustive scan", ok))

    ok = True
    for _ in range(20):
        m = rng.random((48, 48)) < 0.4
        if not m.any():
            continue
        d = (int(rng.integers(-6, 7)), int(rng.integers(-6, 7)))
        got = alignment.find_disparity(m, oracles.push_mask(m, d), 8)
        ok = ok and got == d
    results.append(_check("disparity recovery", ok))

    worst = 0.0
    for _ in range(20):
        gen = rng.normal(0.4, 0.2, rng.integers(5, 30))
        imp = rng.normal(0.8, 0.25, rng.integers(5, 30))
        _, eer = metrics.roc_and_eer(metrics.ScoreSet(gen, imp))
        worst = max(worst, abs(eer - oracles.eer_threshold_scan(gen, imp)))
    results.append(_check("EER vs exhaustive scan", worst <= 1e-9, f"delta {worst:.2e}"))

    ok = True
    for _ in range(20):
        w, h = rng.uniform(16, 400, 2)
        r = oracles.shift_radius_search(w / 16, h / 16)
        sig = max(1e-3, (2 * r + 1) / 6) if r is not None else 1e-3
        ok = ok and abs(targets.adaptive_sigma(w, h, 16) - sig) < 1e-12
    results.append(_check("adaptive sigma vs radius search", ok))
    return results


def _formula_checks() -> list[bool]:
    results = []
    l, _ = losses.focal_loss(np.array([[[0.5]]]), np.array([[[1.0]]]))
    results.append(_check("focal spot value", abs(l - 0.25 * math.log(2)) < 1e-12))

    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    l, _, _ = losses.arc_margin_loss(
        np.array([1.0, 0.0]), 0, losses.ArcMarginParams(1.0, 0.0, w)
    )
    results.append(
        _check("arc-margin m=0 softmax reduction", abs(l - math.log(1 + math.exp(-1))) < 1e-12)
    )

    m = affine_matrix(0.77, (12.5, -3.25))
    fp = m @ np.array([12.5, -3.25, 1.0])
    results.append(
        _check("affine center fixed point", float(np.abs(fp - [12.5, -3.25]).max()) < 1e-9)
    )

    total = losses.total_loss(1, 1, 1, 1, 1)
    results.append(_check("total loss weighting", abs(total - 2.3) < 1e-12))
    return results


def run_selftest() -> bool:
    rng = np.random.default_rng(714)
    results = []
    results += _formula_checks()
    results += _gradient_checks(rng)
    results += _oracle_checks(rng)
    n_ok = sum(results)
    print(f"{n_ok}/{len(results)} checks passed")
    return n_ok == len(results)
