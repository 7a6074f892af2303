"""Desk-scale trainable networks, written directly on numpy.

A stride-16 patch-embedding backbone, the four Conv-ReLU-Conv detection
heads, the fusion net producing the embedding, SGD with momentum, and the
binary checkpoint format. Every forward has a matching analytic backward.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from palmpipe import fusion
from palmpipe.core import image_to_tensor

CHECKPOINT_MAGIC = b"BPFW"
CHECKPOINT_VERSION = 1

HEAD_CHANNELS = {"center": 1, "size": 2, "rot": 4, "disp": 2}


# ---------------------------------------------------------------------------
# primitive layers

@dataclass
class ConvLayer:
    w: np.ndarray  # (C_out, C_in, k, k)
    b: np.ndarray  # (C_out,)
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        k = self.w.shape[2]
        if k not in (1, 3) or self.w.shape[3] != k:
            raise ValueError(f"kernel must be 1x1 or 3x3, got {self.w.shape[2:]}")


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, out_h, out_w, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Cross-correlation of a (C, H, W) tensor with the layer kernel."""
    c_out, c_in, k, _ = layer.w.shape
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ValueError(f"input shape {x.shape} does not match kernel {layer.w.shape}")
    p, s = layer.pad, layer.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    out_h = (xp.shape[1] - k) // s + 1
    out_w = (xp.shape[2] - k) // s + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"input {x.shape} too small for kernel {k} stride {s}")
    win = _windows(xp, k, s, out_h, out_w)
    y = np.tensordot(win, layer.w, axes=((0, 3, 4), (1, 2, 3)))  # (i, j, o)
    return np.ascontiguousarray(y.transpose(2, 0, 1)) + layer.b[:, None, None]


def conv2d_backward(
    x: np.ndarray, layer: ConvLayer, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients wrt input, kernel and bias for :func:`conv2d_forward`."""
    c_out, c_in, k, _ = layer.w.shape
    p, s = layer.pad, layer.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    out_h, out_w = dy.shape[1], dy.shape[2]
    win = _windows(xp, k, s, out_h, out_w)

    db = dy.sum(axis=(1, 2))
    dw = np.tensordot(dy, win, axes=((1, 2), (1, 2)))  # (o, c, u, v)
    dxp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            t = np.tensordot(layer.w[:, :, u, v], dy, axes=(0, 0))  # (C_in, out_h, out_w)
            dxp[:, u : u + s * out_h : s, v : v + s * out_w : s] += t
    dx = dxp[:, p : p + x.shape[1], p : p + x.shape[2]] if p else dxp
    return dx, dw, db


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def patchify(t: np.ndarray, patch: int) -> np.ndarray:
    """Average-pool (C, H, W) into non-overlapping patch x patch cells."""
    c, h, w = t.shape
    if h % patch or w % patch:
        raise ValueError(f"dims {h}x{w} not divisible by patch {patch}")
    return t.reshape(c, h // patch, patch, w // patch, patch).mean(axis=(2, 4))


def patchify_backward(d: np.ndarray, patch: int) -> np.ndarray:
    return np.repeat(np.repeat(d, patch, axis=1), patch, axis=2) / (patch * patch)


def avgpool2(x: np.ndarray) -> np.ndarray:
    return patchify(x, 2)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2))


def gap_backward(d: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    return np.broadcast_to(d[:, None, None], (d.shape[0], h, w)) / (h * w)


# ---------------------------------------------------------------------------
# model state

@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    stride: int = 16
    c_backbone: int = 32
    head_hidden: int = 32
    c_palm: int = 32
    c_vein: int = 32
    embed_dim: int = 512
    roi_grid: int = 8
    fusion: str = "select"          # select | average | max
    arc_s: float = 30.0
    arc_m: float = 0.5
    size_bias: float = 150.0
    center_bias: float = -2.19
    variant: str = "bbox"           # bbox | keypoint
    n_corners: int = 4

    @property
    def vein_px(self) -> int:
        # pre-pool /2 then three stride-2 blocks: total downsample 16
        return self.roi_grid * 16


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.velocity.setdefault(name, np.zeros_like(p))


def head_channel_map(cfg: ModelConfig) -> dict[str, int]:
    if cfg.variant == "keypoint":
        return {"corner": cfg.n_corners}
    return dict(HEAD_CHANNELS)


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Seeded parameter initialization.

    Backbone, heads and fusion net all use fan-in scaled Gaussians (there
    is no normalization layer to absorb a tiny init); detection output
    biases start at the working point (negative center logit, plausible
    palm size).
    """
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)

    p: dict[str, np.ndarray] = {}
    cb = cfg.c_backbone
    p["bb.c1.w"] = he((cb, 3, 1, 1), 3)
    p["bb.c1.b"] = np.zeros(cb)
    p["bb.c2.w"] = he((cb, cb, 1, 1), cb)
    p["bb.c2.b"] = np.zeros(cb)

    for name, out_ch in head_channel_map(cfg).items():
        p[f"head.{name}.c1.w"] = he((cfg.head_hidden, cb, 3, 3), cb * 9)
        p[f"head.{name}.c1.b"] = np.zeros(cfg.head_hidden)
        p[f"head.{name}.c2.w"] = he((out_ch, cfg.head_hidden, 1, 1), cfg.head_hidden)
        bias = np.zeros(out_ch)
        if name in ("center", "corner"):
            bias[:] = cfg.center_bias
        elif name == "size":
            bias[:] = cfg.size_bias
        p[f"head.{name}.c2.b"] = bias

    if cfg.variant == "bbox":
        cv = cfg.c_vein
        v_mid1, v_mid2 = max(1, cv // 4), max(1, cv // 2)
        # 3x3, not pointwise: palm channels need distinct spatial patterns
        # or the correlation-based selection collapses onto one vein channel
        p["fnet.p.w"] = he((cfg.c_palm, cb, 3, 3), cb * 9)
        p["fnet.p.b"] = np.zeros(cfg.c_palm)
        p["fnet.v1.w"] = he((v_mid1, 1, 3, 3), 9)
        p["fnet.v1.b"] = np.zeros(v_mid1)
        p["fnet.v2.w"] = he((v_mid2, v_mid1, 3, 3), v_mid1 * 9)
        p["fnet.v2.b"] = np.zeros(v_mid2)
        p["fnet.v3.w"] = he((cv, v_mid2, 3, 3), v_mid2 * 9)
        p["fnet.v3.b"] = np.zeros(cv)
        p["fnet.g1.w"] = he((cfg.c_palm, cfg.c_palm, 1, 1), cfg.c_palm)
        p["fnet.g1.b"] = np.zeros(cfg.c_palm)
        p["fnet.g2.w"] = he((cfg.c_palm, cfg.c_palm, 1, 1), cfg.c_palm)
        p["fnet.g2.b"] = np.zeros(cfg.c_palm)
        p["fnet.emb.w"] = he((cfg.embed_dim, cfg.c_palm), cfg.c_palm)
        p["fnet.emb.b"] = np.zeros(cfg.embed_dim)
        arc = rng.normal(0.0, 0.01, (cfg.n_classes, cfg.embed_dim))
        p["arc.w"] = arc / np.linalg.norm(arc, axis=1, keepdims=True)

    return ModelState(config=cfg, params=p)


def _layer(state: ModelState, name: str, stride: int = 1, pad: int = 0) -> ConvLayer:
    return ConvLayer(state.params[f"{name}.w"], state.params[f"{name}.b"], stride, pad)


# ---------------------------------------------------------------------------
# backbone

def backbone_forward(state: ModelState, rgb: np.ndarray) -> tuple[np.ndarray, dict]:
    """RGB image -> (C_B, H/16, W/16) feature map."""
    stride = state.config.stride
    t = image_to_tensor(rgb)
    if t.shape[0] != 3:
        raise ValueError("backbone expects an RGB image")
    if t.shape[1] % stride or t.shape[2] % stride:
        raise ValueError(f"image dims {t.shape[1:]} not divisible by stride {stride}")
    p0 = patchify(t, stride)
    a1 = conv2d_forward(p0, _layer(state, "bb.c1"))
    z1, m1 = relu(a1)
    a2 = conv2d_forward(z1, _layer(state, "bb.c2"))
    f, m2 = relu(a2)
    cache = {"t_shape": t.shape, "p0": p0, "z1": z1, "m1": m1, "m2": m2}
    return f, cache


def backbone_backward(
    state: ModelState, cache: dict, d_f: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Returns parameter grads and the gradient wrt the [0,1] input tensor."""
    d_a2 = d_f * cache["m2"]
    d_z1, dw2, db2 = conv2d_backward(cache["z1"], _layer(state, "bb.c2"), d_a2)
    d_a1 = d_z1 * cache["m1"]
    d_p0, dw1, db1 = conv2d_backward(cache["p0"], _layer(state, "bb.c1"), d_a1)
    d_t = patchify_backward(d_p0, state.config.stride)
    grads = {"bb.c1.w": dw1, "bb.c1.b": db1, "bb.c2.w": dw2, "bb.c2.b": db2}
    return grads, d_t


# ---------------------------------------------------------------------------
# detection heads

def heads_forward(state: ModelState, f: np.ndarray) -> tuple[dict[str, np.ndarray], dict]:
    """Four Conv3x3-ReLU-Conv1x1 stacks over the backbone feature.

    The center map is squashed to (0, 1); the rotation map channels are
    ordered (l1, l2, theta1, theta2).
    """
    outs: dict[str, np.ndarray] = {}
    cache: dict[str, dict] = {}
    for name in head_channel_map(state.config):
        a1 = conv2d_forward(f, _layer(state, f"head.{name}.c1", pad=1))
        z1, m1 = relu(a1)
        out = conv2d_forward(z1, _layer(state, f"head.{name}.c2"))
        outs[name] = out
        cache[name] = {"z1": z1, "m1": m1}
    cache["f"] = f
    if "center" in outs:
        outs["yhat"] = np.clip(sigmoid(outs["center"]), 1e-12, 1.0 - 1e-12)
    if "corner" in outs:
        outs["corner_prob"] = np.clip(sigmoid(outs["corner"]), 1e-12, 1.0 - 1e-12)
    return outs, cache


def heads_backward(
    state: ModelState, cache: dict, d_outs: dict[str, np.ndarray]
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backprop per-head output-map gradients down to the shared feature."""
    f = cache["f"]
    d_f = np.zeros_like(f)
    grads: dict[str, np.ndarray] = {}
    for name, d_out in d_outs.items():
        hc = cache[name]
        d_z1, dw2, db2 = conv2d_backward(hc["z1"], _layer(state, f"head.{name}.c2"), d_out)
        d_a1 = d_z1 * hc["m1"]
        d_fi, dw1, db1 = conv2d_backward(f, _layer(state, f"head.{name}.c1", pad=1), d_a1)
        d_f += d_fi
        grads[f"head.{name}.c1.w"] = dw1
        grads[f"head.{name}.c1.b"] = db1
        grads[f"head.{name}.c2.w"] = dw2
        grads[f"head.{name}.c2.b"] = db2
    return d_f, grads


def sigmoid_backward(d_prob: np.ndarray, prob: np.ndarray) -> np.ndarray:
    return d_prob * prob * (1.0 - prob)


# ---------------------------------------------------------------------------
# fusion net

def fnet_forward(
    state: ModelState,
    p_roi: np.ndarray,
    vein_img: np.ndarray | None,
    fusion_mode: str | None = None,
) -> tuple[np.ndarray, dict]:
    """Palmprint ROI features + vein ROI image -> embedding.

    ``vein_img`` None runs the RGB-only path: the vein feature is a zero
    tensor, so selection fusion reduces to the identity on the palmprint
    branch.
    """
    cfg = state.config
    mode = fusion_mode or cfg.fusion
    a_p = conv2d_forward(p_roi, _layer(state, "fnet.p", pad=1))
    p_feat, m_p = relu(a_p)

    cache: dict = {"p_roi": p_roi, "m_p": m_p, "mode": mode, "vein": None}
    if vein_img is None:
        v_feat = np.zeros((cfg.c_vein,) + p_feat.shape[1:])
    else:
        v0 = image_to_tensor(vein_img)
        if v0.shape[0] != 1:
            raise ValueError("vein image must be single channel")
        vp = avgpool2(v0)
        a1 = conv2d_forward(vp, _layer(state, "fnet.v1", stride=2, pad=1))
        z1, mv1 = relu(a1)
        a2 = conv2d_forward(z1, _layer(state, "fnet.v2", stride=2, pad=1))
        z2, mv2 = relu(a2)
        a3 = conv2d_forward(z2, _layer(state, "fnet.v3", stride=2, pad=1))
        v_feat, mv3 = relu(a3)
        if v_feat.shape[1:] != p_feat.shape[1:]:
            raise ValueError(
                f"vein feature grid {v_feat.shape[1:]} does not match palm grid {p_feat.shape[1:]}"
            )
        cache["vein"] = {"vp": vp, "z1": z1, "mv1": mv1, "z2": z2, "mv2": mv2, "mv3": mv3}

    if mode == "select":
        fused_res = fusion.select_and_fuse(p_feat, v_feat)
        fused = fused_res.fused
        cache["selection"] = fused_res.selection
    elif mode == "average":
        fused = fusion.average_fuse(p_feat, v_feat)
    elif mode == "max":
        fused, wins = fusion.max_fuse(p_feat, v_feat)
        cache["wins"] = wins
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")

    # Per-channel spatial centering: rectified statistics of zero-mean maps
    # measure texture energy; without it the positive common mode of the
    # crops swamps the class signal through pooling.
    centered = fused - fused.mean(axis=(1, 2), keepdims=True)
    a_g1 = conv2d_forward(centered, _layer(state, "fnet.g1"))
    z_g1, m_g1 = relu(a_g1)
    # the last block stays un-rectified: pooling rectified maps collapses
    # every embedding onto one common positive direction
    a_g2 = conv2d_forward(z_g1, _layer(state, "fnet.g2"))
    pooled = global_avg_pool(a_g2)
    emb = state.params["fnet.emb.w"] @ pooled + state.params["fnet.emb.b"]

    cache.update(
        {"fused": fused, "centered": centered, "z_g1": z_g1, "m_g1": m_g1,
         "pooled": pooled, "hw": a_g2.shape[1:]}
    )
    return emb, cache


def fnet_backward(
    state: ModelState, cache: dict, d_emb: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns the gradient wrt the palmprint ROI features and param grads."""
    cfg = state.config
    grads: dict[str, np.ndarray] = {
        "fnet.emb.w": np.outer(d_emb, cache["pooled"]),
        "fnet.emb.b": d_emb.copy(),
    }
    d_pooled = state.params["fnet.emb.w"].T @ d_emb
    d_ag2 = gap_backward(d_pooled, cache["hw"])
    d_zg1, dw_g2, db_g2 = conv2d_backward(cache["z_g1"], _layer(state, "fnet.g2"), d_ag2)
    d_ag1 = d_zg1 * cache["m_g1"]
    d_centered, dw_g1, db_g1 = conv2d_backward(cache["centered"], _layer(state, "fnet.g1"), d_ag1)
    d_fused = d_centered - d_centered.mean(axis=(1, 2), keepdims=True)
    grads.update({"fnet.g1.w": dw_g1, "fnet.g1.b": db_g1, "fnet.g2.w": dw_g2, "fnet.g2.b": db_g2})

    mode = cache["mode"]
    if mode == "select":
        d_p_feat, d_v_feat = fusion.select_fuse_backward(
            cache["selection"], d_fused, cfg.c_vein
        )
    elif mode == "average":
        d_p_feat, d_v_feat = fusion.average_fuse_backward(d_fused)
    else:
        d_p_feat, d_v_feat = fusion.max_fuse_backward(cache["wins"], d_fused)

    if cache["vein"] is not None:
        vc = cache["vein"]
        d_a3 = d_v_feat * vc["mv3"]
        d_z2, dw_v3, db_v3 = conv2d_backward(
            vc["z2"], _layer(state, "fnet.v3", stride=2, pad=1), d_a3
        )
        d_a2 = d_z2 * vc["mv2"]
        d_z1, dw_v2, db_v2 = conv2d_backward(
            vc["z1"], _layer(state, "fnet.v2", stride=2, pad=1), d_a2
        )
        d_a1 = d_z1 * vc["mv1"]
        _, dw_v1, db_v1 = conv2d_backward(
            vc["vp"], _layer(state, "fnet.v1", stride=2, pad=1), d_a1
        )
        grads.update(
            {"fnet.v1.w": dw_v1, "fnet.v1.b": db_v1, "fnet.v2.w": dw_v2,
             "fnet.v2.b": db_v2, "fnet.v3.w": dw_v3, "fnet.v3.b": db_v3}
        )

    d_ap = d_p_feat * cache["m_p"]
    d_p_roi, dw_p, db_p = conv2d_backward(cache["p_roi"], _layer(state, "fnet.p", pad=1), d_ap)
    grads.update({"fnet.p.w": dw_p, "fnet.p.b": db_p})
    return d_p_roi, grads


# ---------------------------------------------------------------------------
# optimization

def sgd_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> ModelState:
    """v <- m v + g; w <- w - lr v. Grads may cover a subset of parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        w = state.params[name]
        if weight_decay:
            g = g + weight_decay * w
        v = state.velocity[name]
        v *= momentum
        v += g
        w -= lr * v
    return state


def renormalize_arc_rows(state: ModelState) -> None:
    w = state.params.get("arc.w")
    if w is not None:
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        np.divide(w, norms, out=w, where=norms > 0)


def cosine_lr(epoch: int, total_epochs: int, lr0: float, lr_min: float) -> float:
    if total_epochs <= 1:
        return lr0
    t = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u64 header length, JSON directory,
# little-endian float32 payload

def save_checkpoint(path, state: ModelState) -> None:
    names = sorted(state.params)
    entries = []
    offset = 0
    blobs = []
    for prefix, table in (("p", state.params), ("v", state.velocity)):
        for name in names:
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            entries.append(
                {"name": f"{prefix}/{name}", "dtype": "f4", "shape": list(arr.shape),
                 "offset": offset}
            )
            blobs.append(arr.tobytes())
            offset += len(blobs[-1])
    header = json.dumps(
        {"meta": asdict(state.config), "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()

    cfg = ModelConfig(**header["meta"])
    params: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape).astype(np.float64)
        prefix, name = entry["name"].split("/", 1)
        (params if prefix == "p" else velocity)[name] = arr
    return ModelState(config=cfg, params=params, velocity=velocity)
