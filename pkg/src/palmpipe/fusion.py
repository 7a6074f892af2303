"""Cross-modal channel selection fusing palm-vein features into palmprint
features, plus the element-wise average/max baselines used for ablations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FusedFeature:
    fused: np.ndarray      # (C1, H_f, W_f)
    selection: np.ndarray  # (C1,) index of the vein channel added to each palm channel


def channel_correlation(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine similarity between every palmprint/vein channel pair.

    Channels are flattened over the shared spatial grid; zero-norm
    channels correlate 0 with everything.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if p.shape[1:] != v.shape[1:]:
        raise ValueError(f"spatial dims differ: {p.shape[1:]} vs {v.shape[1:]}")
    pf = p.reshape(p.shape[0], -1)
    vf = v.reshape(v.shape[0], -1)
    np_ = np.linalg.norm(pf, axis=1)
    nv = np.linalg.norm(vf, axis=1)
    denom = np.outer(np_, nv)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, (pf @ vf.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return r


def select_and_fuse(p: np.ndarray, v: np.ndarray) -> FusedFeature:
    """Add to each palmprint channel its most-correlated vein channel.

    Ties pick the lowest vein index. The selection is recorded so the
    backward pass can route gradients with the indices held fixed.
    """
    r = channel_correlation(p, v)
    selection = np.argmax(r, axis=1)
    fused = p + v[selection]
    return FusedFeature(fused=fused, selection=selection)


def select_fuse_backward(
    selection: np.ndarray, d_fused: np.ndarray, n_vein_channels: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the selection fusion wrt both inputs, indices frozen."""
    d_p = np.array(d_fused, dtype=np.float64)
    d_v = np.zeros((n_vein_channels,) + d_fused.shape[1:])
    np.add.at(d_v, selection, d_fused)
    return d_p, d_v


def average_fuse(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Element-wise average baseline; channel counts must match."""
    if p.shape != v.shape:
        raise ValueError(f"average fusion needs equal shapes, got {p.shape} vs {v.shape}")
    return 0.5 * (p + v)


def average_fuse_backward(d_fused: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * d_fused, 0.5 * d_fused


def max_fuse(p: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise maximum baseline; returns the values and the P-wins mask."""
    if p.shape != v.shape:
        raise ValueError(f"max fusion needs equal shapes, got {p.shape} vs {v.shape}")
    wins = p >= v
    return np.where(wins, p, v), wins


def max_fuse_backward(wins: np.ndarray, d_fused: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return d_fused * wins, d_fused * ~wins
