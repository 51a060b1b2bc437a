"""Dense feature maps: keypoint detection, ZNCC, and soft matching.

A feature map carries a per-pixel descriptor field, a score field in [0, 1],
and raw detection logits. Detection picks one sub-pixel keypoint per grid
cell via a spatial softmax over the logits; matching correlates a keypoint's
descriptor against every pixel of a target map and takes the
temperature-softmax weighted average of the pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OutOfBounds
from .formats import read_slfm, write_slfm

VAR_FLOOR = 1e-12


@dataclass
class FeatureMap:
    """Per-pixel descriptors (H, W, D) float32, scores and logits (H, W)."""

    descriptors: np.ndarray
    scores: np.ndarray
    detect_logits: np.ndarray

    def __post_init__(self) -> None:
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        self.detect_logits = np.ascontiguousarray(self.detect_logits, dtype=np.float32)
        h, w, d = self.descriptors.shape
        if d < 2:
            raise ValueError(f"descriptor dim must be >= 2, got {d}")
        if self.scores.shape != (h, w) or self.detect_logits.shape != (h, w):
            raise ValueError("scores and logits must match the descriptor grid")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.descriptors.shape[:2]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]


@dataclass
class Keypoint:
    """Sub-pixel detection: position (u, v), sampled descriptor and score."""

    uv: np.ndarray
    descriptor: np.ndarray
    score: float


def save_feature_map(path: str | Path, fmap: FeatureMap) -> None:
    """Pack descriptors, score, and logit channels into one SLFM file."""
    stacked = np.concatenate(
        [fmap.descriptors, fmap.scores[:, :, None], fmap.detect_logits[:, :, None]],
        axis=2,
    )
    write_slfm(path, stacked)


def load_feature_map(path: str | Path) -> FeatureMap:
    arr = read_slfm(path)
    return FeatureMap(
        descriptors=arr[:, :, :-2],
        scores=arr[:, :, -2],
        detect_logits=arr[:, :, -1],
    )


def bilinear_sample(fmap: FeatureMap, q: np.ndarray) -> tuple[np.ndarray, float]:
    """Sample descriptor and score at sub-pixel (u, v).

    Raises OutOfBounds when q leaves [0, W-1] x [0, H-1].
    """
    h, w = fmap.shape
    u, v = float(q[0]), float(q[1])
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfBounds(f"({u:.2f}, {v:.2f}) outside {w}x{h} map")
    desc = _bilinear(fmap.descriptors, np.array([u]), np.array([v]))[0]
    score = _bilinear(fmap.scores[:, :, None], np.array([u]), np.array([v]))[0, 0]
    return desc.astype(np.float64), float(score)


def _bilinear(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sample of an (H, W, C) grid at coords (N,), (N,)."""
    h, w = grid.shape[:2]
    u0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    g = grid.astype(np.float64, copy=False)
    top = g[v0, u0] * (1.0 - fu) + g[v0, u1] * fu
    bot = g[v1, u0] * (1.0 - fu) + g[v1, u1] * fu
    return top * (1.0 - fv) + bot * fv


def detect_keypoints(fmap: FeatureMap, cell: int = 16) -> list[Keypoint]:
    """One keypoint per cell x cell grid cell via spatial softmax of the logits.

    The keypoint is the softmax-weighted average of pixel coordinates within
    the cell; grids that do not divide the image are padded and masked.
    Returns ceil(H/cell) * ceil(W/cell) keypoints in row-major cell order.
    """
    if cell < 1:
        raise ValueError("cell size must be positive")
    h, w = fmap.shape
    logits = fmap.detect_logits.astype(np.float64)
    gh = -(-h // cell)
    gw = -(-w // cell)
    padded = np.full((gh * cell, gw * cell), -np.inf)
    padded[:h, :w] = logits
    cells = padded.reshape(gh, cell, gw, cell).transpose(0, 2, 1, 3)
    cells = cells.reshape(gh, gw, cell * cell)

    peak = np.max(cells, axis=2, keepdims=True)
    wts = np.exp(cells - peak)
    wts /= np.sum(wts, axis=2, keepdims=True)

    uu, vv = np.meshgrid(np.arange(gw * cell, dtype=np.float64),
                         np.arange(gh * cell, dtype=np.float64))
    ug = uu.reshape(gh, cell, gw, cell).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
    vg = vv.reshape(gh, cell, gw, cell).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
    # padded pixels carry weight exp(-inf) = 0, so masking is implicit
    ku = np.sum(wts * ug, axis=2).reshape(-1)
    kv = np.sum(wts * vg, axis=2).reshape(-1)

    # every cell holds at least one unpadded pixel, so the weighted
    # coordinates stay in bounds and one batched lookup covers all cells
    descs = _bilinear(fmap.descriptors, ku, kv)
    scores = _bilinear(fmap.scores[:, :, None], ku, kv)[:, 0]
    return [Keypoint(uv=np.array([ku[k], kv[k]]),
                     descriptor=descs[k].astype(np.float64),
                     score=float(scores[k]))
            for k in range(len(ku))]


def zncc(d1: np.ndarray, d2: np.ndarray) -> float:
    """Zero-normalized cross-correlation of two descriptors, in [-1, 1].

    Either side having (near) zero variance yields 0.
    """
    a = np.asarray(d1, dtype=np.float64)
    b = np.asarray(d2, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    va = np.mean(a * a)
    vb = np.mean(b * b)
    if va < VAR_FLOOR or vb < VAR_FLOOR:
        return 0.0
    z = float(np.mean(a * b) / np.sqrt(va * vb))
    return float(np.clip(z, -1.0, 1.0))


def normalized_descriptor_grid(fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel zero-mean unit-variance descriptors, flattened to (H*W, D).

    Returns (normalized, valid) where valid marks pixels whose variance
    cleared the floor; invalid rows are zeroed so their correlation is 0.
    """
    h, w, d = fmap.descriptors.shape
    flat = fmap.descriptors.reshape(h * w, d).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    var = np.mean(flat * flat, axis=1)
    valid = var >= VAR_FLOOR
    scale = np.zeros_like(var)
    scale[valid] = 1.0 / np.sqrt(var[valid])
    return flat * scale[:, None], valid


def soft_match(
    kp: Keypoint,
    target: FeatureMap,
    tau: float = 10.0,
    stride: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft-match a keypoint into a target map.

    Correlates the keypoint descriptor against every target pixel (optionally
    a strided subset, for speed only), applies a temperature softmax to the
    correlations, and averages pixel coordinates under those weights.
    Returns (matched (u, v), correlation map of shape (H, W) with stride
    holes left at 0).
    """
    uv, profile = soft_match_many(kp.descriptor[None, :], target, tau, stride)
    return uv[0], profile[0]


def soft_match_many(
    descriptors: np.ndarray,
    target: FeatureMap,
    tau: float = 10.0,
    stride: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched soft matching: (N, D) descriptors against one target map.

    Returns ((N, 2) matched coordinates, (N, H, W) correlation maps).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = target.shape
    d = target.dim
    q = np.asarray(descriptors, dtype=np.float64)
    if q.shape[1] != d:
        raise ValueError(f"descriptor dim {q.shape[1]} != map dim {d}")

    tgt_norm, _ = normalized_descriptor_grid(target)
    qn = q - q.mean(axis=1, keepdims=True)
    qvar = np.mean(qn * qn, axis=1)
    ok = qvar >= VAR_FLOOR
    qn[ok] /= np.sqrt(qvar[ok])[:, None]
    qn[~ok] = 0.0

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if stride > 1:
        mask = np.zeros((h, w), dtype=bool)
        mask[::stride, ::stride] = True
        sel = mask.reshape(-1)
    else:
        sel = slice(None)
    corr = np.clip(qn @ tgt_norm[sel].T / d, -1.0, 1.0)  # (N, M)
    peak = corr.max(axis=1, keepdims=True)
    wts = np.exp(tau * (corr - peak))
    wts /= wts.sum(axis=1, keepdims=True)
    us = uu.reshape(-1)[sel]
    vs = vv.reshape(-1)[sel]
    uv = np.stack([wts @ us, wts @ vs], axis=1)
    # convex average of pixel coords; clamp float round-off at the borders
    uv[:, 0] = np.clip(uv[:, 0], 0.0, w - 1)
    uv[:, 1] = np.clip(uv[:, 1], 0.0, h - 1)

    profiles = np.zeros((q.shape[0], h * w))
    profiles[:, sel if stride > 1 else slice(None)] = corr
    return uv, profiles.reshape(-1, h, w)
