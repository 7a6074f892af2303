"""Command-line interface: synth, train, detect, align, eval, selftest."""

from __future__ import annotations

import argparse
import json
import math
import sys

from palmpipe import pnm


def _cmd_synth(args) -> int:
    from palmpipe.data import SynthConfig, synth_generate

    cfg = SynthConfig(
        classes=args.classes,
        per_class=args.per_class,
        seed=args.seed,
        confusable_rgb=args.confusable_rgb,
    )
    ds = synth_generate(cfg, args.out)
    print(json.dumps({"samples": len(ds.records), "classes": cfg.classes, "out": str(ds.root)}))
    return 0


def _cmd_train(args) -> int:
    from palmpipe.data import load_dataset
    from palmpipe.losses import LossWeights
    from palmpipe.nets import ModelConfig, save_checkpoint
    from palmpipe.train import TrainConfig, train

    ds = load_dataset(args.data)
    cfg = TrainConfig(
        stage1_epochs=args.stage1_epochs,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lr_min=args.lr_min,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        loss_weights=LossWeights(mu=args.mu, lambda1=args.lambda1, lambda2=args.lambda2),
        mode=args.mode,
        seed=args.seed,
    )
    n_classes = max(r.label for r in ds.records) + 1
    model_cfg = ModelConfig(
        n_classes=n_classes,
        embed_dim=args.embed_dim,
        roi_grid=args.roi_grid,
        fusion=args.fusion,
    )
    log_path = args.log or (args.out + ".log.jsonl")
    state, history = train(ds, cfg, model_cfg, log_path=log_path)
    save_checkpoint(args.out, state)
    last = history[-1] if history else {}
    print(json.dumps({"out": args.out, "epochs": cfg.epochs, "final": last}, sort_keys=True))
    return 0


def _cmd_detect(args) -> int:
    from palmpipe.nets import load_checkpoint
    from palmpipe.pipeline import infer

    state = load_checkpoint(args.model)
    rgb = pnm.read_ppm(args.rgb)
    ir = pnm.read_pgm(args.ir) if args.ir else None
    mode = "rgb+ir" if ir is not None else "rgb"
    res = infer(state, rgb, ir, mode=mode)
    box = res.box
    out = {
        "box": {
            "x_c": box.x_c,
            "y_c": box.y_c,
            "w": box.w,
            "h": box.h,
            "theta_deg": math.degrees(box.theta),
        },
        "disparity": {"d_x": res.disparity.d_x, "d_y": res.disparity.d_y},
        "embedding_dim": len(res.embedding),
    }
    if args.json:
        out["embedding"] = [float(x) for x in res.embedding]
        print(json.dumps(out, sort_keys=True))
    else:
        b = out["box"]
        print(
            f"box: x_c={b['x_c']:.2f} y_c={b['y_c']:.2f} w={b['w']:.2f} "
            f"h={b['h']:.2f} theta_deg={b['theta_deg']:.3f}"
        )
        print(f"disparity: d_x={res.disparity.d_x} d_y={res.disparity.d_y}")
        print(f"embedding_dim: {len(res.embedding)}")
    return 0


def _cmd_align(args) -> int:
    from palmpipe.alignment import find_disparity, otsu_binarize, segment_palm_rgb
    from palmpipe.core import RotatedBox

    parts = [float(x) for x in args.box.split(",")]
    if len(parts) != 5:
        raise SystemExit("--box expects 'xc,yc,w,h,thetadeg'")
    box = RotatedBox(parts[0], parts[1], parts[2], parts[3], math.radians(parts[4]))
    rgb = pnm.read_ppm(args.rgb)
    ir = pnm.read_pgm(args.ir)
    m_rgb = segment_palm_rgb(rgb, box)
    m_ir = otsu_binarize(ir)
    if args.mask_out:
        pnm.write_pbm(args.mask_out + ".rgb.pbm", m_rgb)
        pnm.write_pbm(args.mask_out + ".ir.pbm", m_ir)
    d = find_disparity(m_rgb, m_ir, args.range)
    print(json.dumps({"d_x": d[0], "d_y": d[1]}))
    return 0


def _cmd_eval(args) -> int:
    from palmpipe.data import load_dataset
    from palmpipe.nets import load_checkpoint
    from palmpipe.pipeline import evaluate

    state = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    roi_source = {"predicted": "predicted", "gt": "gt"}[args.roi]
    metrics = evaluate(
        state, ds, mode=args.mode, roi_source=roi_source,
        roc_path=args.roc, metrics_path=args.metrics,
    )
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_selftest(args) -> int:
    from palmpipe.selftest import run_selftest

    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="palmpipe", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--confusable-rgb", action="store_true",
                   help="class pairs share RGB texture and differ only in veins")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="two-stage training run")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-epochs", type=int, default=15)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lr-min", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4,
                   help="decoupled from --momentum; see README on the ambiguity")
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--mode", choices=["rgb", "rgb+ir"], default="rgb+ir")
    p.add_argument("--fusion", choices=["select", "average", "max"], default="select")
    p.add_argument("--embed-dim", type=int, default=512)
    p.add_argument("--roi-grid", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="JSON-lines epoch log (default <out>.log.jsonl)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="run detection + embedding on one image pair")
    p.add_argument("--model", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--ir", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("align", help="classical mask-overlap disparity search")
    p.add_argument("--rgb", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--box", required=True, help="'xc,yc,w,h,thetadeg' ground-truth ROI")
    p.add_argument("--range", type=int, default=32)
    p.add_argument("--mask-out", default=None, help="basename for PBM mask dumps")
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("eval", help="detection + verification metrics on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["rgb", "rgb+ir"], default="rgb+ir")
    p.add_argument("--roi", choices=["predicted", "gt"], default="predicted")
    p.add_argument("--roc", default=None)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("selftest", help="gradient and oracle verification suite")
    p.set_defaults(func=_cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
