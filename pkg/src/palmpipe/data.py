"""Synthetic bimodal palm dataset: generation, annotation CSV, split files
and the loader.

Each sample is a skin-colored textured palm square on a distinct
background. The IR twin shows the same silhouette displaced by the ground
truth disparity and carries a vein-like sinusoid texture. Intensity
shading encodes the palm geometry (a center-peaked dome, an orientation
ramp along the palm axis, and a size-dependent brightness), so the
detection task is learnable by a small local net.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from palmpipe import pnm
from palmpipe.core import RotatedBox, rot2d

N_ENROLL = 4
N_PROBE = 4

BACKGROUND_RGB = (46.0, 58.0, 150.0)
BACKGROUND_IR = 16.0


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 10
    per_class: int = 20
    canvas: int = 256
    theta_max_deg: float = 30.0
    disparity_max: int = 8
    size_range: tuple[float, float] = (128.0, 168.0)
    skin_mean: tuple[float, float, float] = (150.0, 120.0, 102.0)
    noise_std: float = 4.0
    confusable_rgb: bool = False
    seed: int = 0


@dataclass(frozen=True)
class ClassStyle:
    base: np.ndarray      # (3,) skin color
    stripe_f: float
    stripe_phi: float
    vein_f: float
    vein_phi: float


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    label: int
    box: RotatedBox
    disparity: tuple[int, int]


@dataclass
class Dataset:
    root: Path
    records: list[SampleRecord]
    train_ids: list[str]
    enroll_ids: list[str]
    probe_ids: list[str]
    by_id: dict[str, SampleRecord] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_id:
            self.by_id = {r.sample_id: r for r in self.records}

    def rgb_path(self, sample_id: str) -> Path:
        return self.root / "rgb" / f"{sample_id}.ppm"

    def ir_path(self, sample_id: str) -> Path:
        return self.root / "ir" / f"{sample_id}.pgm"

    def load_rgb(self, sample_id: str) -> np.ndarray:
        return pnm.read_ppm(self.rgb_path(sample_id))

    def load_ir(self, sample_id: str) -> np.ndarray:
        return pnm.read_pgm(self.ir_path(sample_id))


def class_styles(cfg: SynthConfig) -> list[ClassStyle]:
    """Deterministic per-class texture parameters.

    With ``confusable_rgb`` classes form pairs sharing identical RGB
    appearance and differing only in vein texture.
    """
    styles = []
    n = cfg.classes
    for i in range(n):
        rgb_key = i // 2 if cfg.confusable_rgb else i
        off = np.array(
            [(rgb_key * 37) % 37 - 18, (rgb_key * 53) % 37 - 18, (rgb_key * 71) % 37 - 18],
            dtype=np.float64,
        )
        stripe_f = 1.6 + 0.4 * (rgb_key % 5)
        stripe_phi = math.pi * (rgb_key % n) / n
        if cfg.confusable_rgb:
            pair, member = divmod(i, 2)
            n_pairs = (n + 1) // 2
            vein_phi = 0.45 * math.pi * pair / max(1, n_pairs) + member * (math.pi / 2)
            vein_f = 2.0 + 0.8 * member
        else:
            vein_phi = math.pi * (i + 0.5) / n
            vein_f = 1.8 + 0.35 * (i % 6)
        styles.append(
            ClassStyle(
                base=np.asarray(cfg.skin_mean) + off,
                stripe_f=stripe_f,
                stripe_phi=stripe_phi,
                vein_f=vein_f,
                vein_phi=vein_phi,
            )
        )
    return styles


def _palm_frame(canvas: int, cx: float, cy: float, w: float, h: float, theta: float):
    """Normalized palm-frame coordinates (u, v) per pixel and the inside mask."""
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    r_inv = rot2d(-theta)
    u = (r_inv[0, 0] * dx + r_inv[0, 1] * dy) / (w / 2)
    v = (r_inv[1, 0] * dx + r_inv[1, 1] * dy) / (h / 2)
    inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return u, v, inside


def render_rgb(
    cfg: SynthConfig, style: ClassStyle, box: RotatedBox, rng: np.random.Generator
) -> np.ndarray:
    u, v, inside = _palm_frame(cfg.canvas, box.x_c, box.y_c, box.w, box.h, box.theta)
    smin, smax = cfg.size_range
    sz = (box.w - smin) / max(1e-9, smax - smin)
    # luminance carries the geometry cues: dome peak at the center, peak
    # brightness tied to palm scale, plus a compact blob that keeps the
    # center cell distinguishable at feature-grid resolution
    lum = (0.76 + 0.28 * sz) * (1.0 - 0.10 * (u * u + v * v))
    rr2 = ((u * box.w) ** 2 + (v * box.h) ** 2) / 4.0
    lum = lum * (1.0 + 0.30 * np.exp(-rr2 / (2.0 * 18.0**2)))
    # rotation rides a red/blue opponent ramp along the palm axis, kept
    # orthogonal to the luminance cues above
    ramp = 0.28 * v
    chan_gain = (1.0 + ramp, 1.0, 1.0 - ramp)
    stripe = 7.0 * np.sin(math.pi * style.stripe_f * (u * math.cos(style.stripe_phi) + v * math.sin(style.stripe_phi)))
    img = np.empty((cfg.canvas, cfg.canvas, 3))
    for c in range(3):
        img[..., c] = np.where(inside, style.base[c] * lum * chan_gain[c] + stripe, BACKGROUND_RGB[c])
    img += rng.normal(0.0, cfg.noise_std, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def render_ir(
    cfg: SynthConfig, style: ClassStyle, box: RotatedBox,
    disparity: tuple[int, int], rng: np.random.Generator,
) -> np.ndarray:
    # IR palm content sits displaced by +d relative to the RGB palm.
    cx = box.x_c + disparity[0]
    cy = box.y_c + disparity[1]
    u, v, inside = _palm_frame(cfg.canvas, cx, cy, box.w, box.h, box.theta)
    vein = 112.0 + 62.0 * np.sin(
        math.pi * style.vein_f * (u * math.cos(style.vein_phi) + v * math.sin(style.vein_phi))
    )
    img = np.where(inside, vein, BACKGROUND_IR)
    img = img + rng.normal(0.0, 3.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _draw_sample(cfg: SynthConfig, rng: np.random.Generator) -> tuple[RotatedBox, tuple[int, int]]:
    smin, smax = cfg.size_range
    w = rng.uniform(smin, smax)
    theta = math.radians(rng.uniform(-cfg.theta_max_deg, cfg.theta_max_deg))
    reach = (w / 2) * (abs(math.cos(theta)) + abs(math.sin(theta)))
    margin = cfg.disparity_max + 2
    lo, hi = reach + margin, cfg.canvas - 1 - reach - margin
    if hi < lo:
        raise ValueError(f"palm of size {w:.0f} does not fit the {cfg.canvas} canvas")
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    # Disparity tracks palm size, standing in for the hand-height dependence.
    t = 2.0 * (w - smin) / max(1e-9, smax - smin) - 1.0
    d_x = int(round(cfg.disparity_max * t))
    d_y = int(round(-0.6 * cfg.disparity_max * t))
    return RotatedBox(cx, cy, w, w, theta), (d_x, d_y)


def synth_generate(cfg: SynthConfig, out_dir) -> Dataset:
    """Write the full dataset (images, annotations, splits) to ``out_dir``."""
    if cfg.per_class < N_ENROLL + N_PROBE + 1:
        raise ValueError(f"per_class must be at least {N_ENROLL + N_PROBE + 1}")
    root = Path(out_dir)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "ir").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    styles = class_styles(cfg)
    records: list[SampleRecord] = []
    train_ids, enroll_ids, probe_ids = [], [], []

    for label in range(cfg.classes):
        for s in range(cfg.per_class):
            box, disp = _draw_sample(cfg, rng)
            sample_id = f"c{label:03d}_s{s:03d}"
            rgb = render_rgb(cfg, styles[label], box, rng)
            ir = render_ir(cfg, styles[label], box, disp, rng)
            pnm.write_ppm(root / "rgb" / f"{sample_id}.ppm", rgb)
            pnm.write_pgm(root / "ir" / f"{sample_id}.pgm", ir)
            records.append(SampleRecord(sample_id, label, box, disp))
            if s < cfg.per_class - (N_ENROLL + N_PROBE):
                train_ids.append(sample_id)
            elif s < cfg.per_class - N_PROBE:
                enroll_ids.append(sample_id)
            else:
                probe_ids.append(sample_id)

    write_annotations(root / "annotations.csv", records)
    for name, ids in (("train", train_ids), ("enroll", enroll_ids), ("probe", probe_ids)):
        with open(root / f"{name}.txt", "w") as f:
            f.write("".join(i + "\n" for i in ids))
    return Dataset(root, records, train_ids, enroll_ids, probe_ids)


def write_annotations(path, records: list[SampleRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label", "x_c", "y_c", "w", "h", "theta_deg", "d_x", "d_y"])
        for r in records:
            writer.writerow(
                [
                    r.sample_id,
                    r.label,
                    repr(r.box.x_c),
                    repr(r.box.y_c),
                    repr(r.box.w),
                    repr(r.box.h),
                    repr(math.degrees(r.box.theta)),
                    r.disparity[0],
                    r.disparity[1],
                ]
            )


def read_annotations(path) -> list[SampleRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            box = RotatedBox(
                float(row["x_c"]),
                float(row["y_c"]),
                float(row["w"]),
                float(row["h"]),
                math.radians(float(row["theta_deg"])),
            )
            records.append(
                SampleRecord(row["id"], int(row["label"]), box, (int(row["d_x"]), int(row["d_y"])))
            )
    return records


def load_dataset(root) -> Dataset:
    root = Path(root)
    records = read_annotations(root / "annotations.csv")

    def read_ids(name):
        with open(root / f"{name}.txt") as f:
            return [line.strip() for line in f if line.strip()]

    return Dataset(root, records, read_ids("train"), read_ids("enroll"), read_ids("probe"))
