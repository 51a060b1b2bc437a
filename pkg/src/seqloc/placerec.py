"""Sequence-based place recognition over whole-image statistics.

Images are area-downsampled and patch-normalized, compared by mean absolute
difference into a query x reference matrix, optionally contrast-enhanced
within vertical neighbourhoods, and matched by sweeping constant-velocity
alignment lines through short frame sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadGeometry, SequenceTooShort

PATCH_VAR_FLOOR = 1e-6
ENHANCE_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PlacerecParams:
    down_w: int = 32
    down_h: int = 24
    patch: int = 8
    seq_len: int = 11
    v_min: float = 0.8
    v_max: float = 1.25
    v_steps: int = 7
    window_r: int = 5
    enhance: bool = True


@dataclass
class RawMatchList:
    """Per-query-frame best reference frame and its alignment score."""

    query_id: int
    ref_id: int
    ref_frames: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ref_frames)


def preprocess(image: np.ndarray, down_w: int = 32, down_h: int = 24,
               patch: int = 8) -> np.ndarray:
    """Downsample by block averaging, then normalize each patch x patch tile
    to zero mean and unit variance (variance floored at 1e-6).

    The image dims must be integer multiples of (down_h, down_w) and the
    patch must divide the downsampled dims; BadGeometry otherwise. Output is
    invariant to affine intensity changes of the input.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise BadGeometry("preprocess expects a 2-D grayscale image")
    h, w = img.shape
    if h % down_h or w % down_w:
        raise BadGeometry(f"{w}x{h} image does not block-average to {down_w}x{down_h}")
    if down_h % patch or down_w % patch:
        raise BadGeometry(f"patch {patch} does not divide {down_w}x{down_h}")

    fy, fx = h // down_h, w // down_w
    small = img.reshape(down_h, fy, down_w, fx).mean(axis=(1, 3))

    py, px = down_h // patch, down_w // patch
    tiles = small.reshape(py, patch, px, patch)
    mean = tiles.mean(axis=(1, 3), keepdims=True)
    var = ((tiles - mean) ** 2).mean(axis=(1, 3), keepdims=True)
    std = np.sqrt(np.maximum(var, PATCH_VAR_FLOOR))
    return ((tiles - mean) / std).reshape(down_h, down_w)


def difference_matrix(query_images: list[np.ndarray], ref_images: list[np.ndarray],
                      params: PlacerecParams = PlacerecParams()) -> np.ndarray:
    """Mean absolute difference between preprocessed frames.

    Entry (i, j) compares query frame i against reference frame j.
    """
    q = np.stack([
        preprocess(im, params.down_w, params.down_h, params.patch).reshape(-1)
        for im in query_images
    ])
    r = np.stack([
        preprocess(im, params.down_w, params.down_h, params.patch).reshape(-1)
        for im in ref_images
    ])
    return np.mean(np.abs(q[:, None, :] - r[None, :, :]), axis=2)


def contrast_enhance(D: np.ndarray, window_r: int = 5) -> np.ndarray:
    """Normalize each entry against its vertical neighbourhood in the column.

    Each entry has the mean of the surrounding 2r+1 window (clipped at the
    matrix edges) subtracted and is divided by the window's standard
    deviation, floored at 1e-6. Adding a constant to D leaves the result
    unchanged; a constant matrix maps to zeros.
    """
    D = np.asarray(D, dtype=np.float64)
    nq = D.shape[0]
    out = np.empty_like(D)
    for i in range(nq):
        lo = max(0, i - window_r)
        hi = min(nq, i + window_r + 1)
        win = D[lo:hi]
        mean = win.mean(axis=0)
        std = np.maximum(win.std(axis=0), ENHANCE_STD_FLOOR)
        out[i] = (D[i] - mean) / std
    return out


def match_sequences(D: np.ndarray, params: PlacerecParams = PlacerecParams(),
                    query_id: int = 0, ref_id: int = 0) -> RawMatchList:
    """Best reference frame per query frame by constant-velocity line search.

    For each query frame and candidate reference frame, alignment lines at
    v_steps velocities in [v_min, v_max] are summed over seq_len frames
    centred on the query (nearest-index sampling along the reference axis).
    Cells falling outside the matrix are skipped and penalized by the matrix
    mean. The lowest line sum wins; ties go to the lower reference frame,
    then the lower velocity index.
    """
    D = np.asarray(D, dtype=np.float64)
    nq, nr = D.shape
    L = params.seq_len
    if L < 1 or L % 2 == 0:
        raise SequenceTooShort(f"seq_len must be odd and positive, got {L}")
    if nq < L:
        raise SequenceTooShort(f"query has {nq} frames, need at least {L}")
    if nr < 1:
        raise SequenceTooShort("reference experience is empty")

    offsets = np.arange(L) - L // 2
    velocities = np.linspace(params.v_min, params.v_max, params.v_steps)
    penalty = float(D.mean())
    # ref-index offsets per (velocity, sequence position)
    roff = np.rint(velocities[:, None] * offsets[None, :]).astype(int)

    best_ref = np.zeros(nq, dtype=int)
    best_score = np.zeros(nq)
    ref_base = np.arange(nr)
    for i in range(nq):
        qi = i + offsets
        q_ok = (qi >= 0) & (qi < nq)
        qi_c = np.clip(qi, 0, nq - 1)
        # scores[v, j] = sum of the line through (i, j) at velocity v
        scores = np.full((params.v_steps, nr), 0.0)
        for vi in range(params.v_steps):
            rj = ref_base[None, :] + roff[vi][:, None]  # (L, nr)
            ok = q_ok[:, None] & (rj >= 0) & (rj < nr)
            rj_c = np.clip(rj, 0, nr - 1)
            vals = D[qi_c[:, None], rj_c]
            vals = np.where(ok, vals, penalty)
            scores[vi] = vals.sum(axis=0)
        flat = np.argmin(scores.T)  # row-major over (ref, velocity): ref ties first
        best_ref[i] = flat // params.v_steps
        best_score[i] = scores.T.reshape(-1)[flat]

    return RawMatchList(query_id=query_id, ref_id=ref_id,
                        ref_frames=best_ref, scores=best_score)


def match_experiences(query_images: list[np.ndarray], ref_images: list[np.ndarray],
                      params: PlacerecParams = PlacerecParams(),
                      query_id: int = 0, ref_id: int = 0) -> RawMatchList:
    """difference_matrix -> optional contrast_enhance -> match_sequences."""
    D = difference_matrix(query_images, ref_images, params)
    if params.enhance:
        D = contrast_enhance(D, params.window_r)
    return match_sequences(D, params, query_id=query_id, ref_id=ref_id)
