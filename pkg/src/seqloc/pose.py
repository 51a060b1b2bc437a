"""Relative pose estimation from soft-matched stereo keypoints.

Descriptors detected in the source map are soft-matched into both the
source and the target map, giving refined source and matched target
coordinates from the same operator. Both sides are backprojected through
their disparity channels, a RANSAC loop over 3-point rigid fits selects
inliers, and a correlation-and-score weighted SVD alignment produces the
final transform plus a self-supervised keypoint loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, NoConsensus, OutOfBounds, TooFewValidDepths
from .features import (FeatureMap, _bilinear, bilinear_sample, detect_keypoints,
                       soft_match_many, zncc)
from .geometry import StereoCamera, Transform


@dataclass(frozen=True)
class PoseParams:
    cell: int = 16
    tau: float = 10.0
    d_min: float = 0.5
    ransac_iterations: int = 500
    inlier_sq_threshold: float = 0.01
    seed: int = 0
    stride: int = 1


@dataclass
class MatchedPair:
    """One source keypoint matched into a target frame, both backprojected.

    uv_det is the raw detection position; q_s and q_t are the refined
    coordinates produced by soft-matching the detected descriptor into the
    source and target maps with the same operator, so a frame matched
    against itself yields q_s == q_t exactly.
    """

    p_s: np.ndarray
    p_t: np.ndarray
    uv_det: np.ndarray
    q_s: np.ndarray
    q_t: np.ndarray
    desc_s: np.ndarray
    desc_t: np.ndarray
    score_s: float
    score_t: float
    weight: float
    inlier: bool = True


@dataclass
class PoseEstimate:
    transform: Transform
    inlier_count: int
    loss: float
    residuals: np.ndarray
    pairs: list[MatchedPair] = field(default_factory=list)


def match_weight(desc_s: np.ndarray, desc_t: np.ndarray,
                 score_s: float, score_t: float) -> float:
    """Half the shifted descriptor correlation times both detection scores."""
    return 0.5 * (zncc(desc_s, desc_t) + 1.0) * float(score_s) * float(score_t)


_DEDUPE_RADIUS = 1.0


def _dedupe_pairs(pairs: list[MatchedPair]) -> list[MatchedPair]:
    """Collapse matches whose refined coordinates landed on the same spot.

    Several detections of one blob refine onto its correlation peak; they
    carry no independent geometry and would let the consensus count the
    same evidence twice. Keep the heaviest match per location on each side.
    """
    order = sorted(range(len(pairs)), key=lambda i: (-pairs[i].weight, i))
    r2 = _DEDUPE_RADIUS * _DEDUPE_RADIUS
    kept_idx: list[int] = []
    for i in order:
        p = pairs[i]
        dup = False
        for j in kept_idx:
            q = pairs[j]
            ds = (p.q_s[0] - q.q_s[0]) ** 2 + (p.q_s[1] - q.q_s[1]) ** 2
            dt = (p.q_t[0] - q.q_t[0]) ** 2 + (p.q_t[1] - q.q_t[1]) ** 2
            if ds < r2 or dt < r2:
                dup = True
                break
        if not dup:
            kept_idx.append(i)
    return [pairs[i] for i in sorted(kept_idx)]


def _fit_rigid(src: np.ndarray, tgt: np.ndarray, w: np.ndarray) -> Transform:
    """Weighted least-squares rigid alignment (source -> target)."""
    wsum = float(w.sum())
    if wsum <= 0.0:
        raise DegenerateGeometry("total weight is zero")
    wn = (w / wsum)[:, None]
    cs = (wn * src).sum(axis=0)
    ct = (wn * tgt).sum(axis=0)
    a = src - cs
    b = tgt - ct
    H = a.T @ (wn * b)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-9 * max(S[0], 1e-12):
        raise DegenerateGeometry("source points are collinear or coincident")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    C = V @ np.diag([1.0, 1.0, d]) @ U.T
    r = ct - C @ cs
    return Transform(C, r)


def weighted_alignment(pairs: list[MatchedPair]) -> Transform:
    """Weighted rigid alignment over matched pairs.

    Needs at least 3 pairs with positive total weight and non-collinear
    source points; DegenerateGeometry otherwise.
    """
    if len(pairs) < 3:
        raise DegenerateGeometry(f"need at least 3 pairs, got {len(pairs)}")
    src = np.stack([p.p_s for p in pairs])
    tgt = np.stack([p.p_t for p in pairs])
    w = np.array([p.weight for p in pairs], dtype=np.float64)
    if np.any(w < 0.0):
        raise DegenerateGeometry("negative weights")
    return _fit_rigid(src, tgt, w)


def ransac(
    pairs: list[MatchedPair],
    iterations: int = 500,
    inlier_sq_threshold: float = 0.01,
    seed: int = 0,
) -> np.ndarray:
    """Consensus flags from repeated uniform-weight 3-point fits.

    Each iteration fits a rigid transform to 3 distinct pairs and counts
    pairs with squared residual below the threshold. The largest consensus
    wins, ties broken by lower total inlier residual. Raises NoConsensus
    when the best consensus has fewer than 3 members. Deterministic in seed.
    """
    n = len(pairs)
    if n < 3:
        raise NoConsensus(f"need at least 3 pairs, got {n}")
    src = np.stack([p.p_s for p in pairs])
    tgt = np.stack([p.p_t for p in pairs])
    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(iterations)])

    a = src[samples]  # (it, 3, 3)
    b = tgt[samples]
    ca = a.mean(axis=1, keepdims=True)
    cb = b.mean(axis=1, keepdims=True)
    H = np.einsum("nij,nik->njk", a - ca, b - cb)
    U, S, Vt = np.linalg.svd(H)
    ok = S[:, 1] > 1e-9 * np.maximum(S[:, 0], 1e-12)
    det = np.linalg.det(np.einsum("nij,nkj->nik", Vt, U))  # det(V @ U.T)
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.sign(det)
    C = np.einsum("nji,njk,nkl->nil", Vt, D, np.transpose(U, (0, 2, 1)))
    r = cb[:, 0, :] - np.einsum("nij,nj->ni", C, ca[:, 0, :])

    mapped = np.einsum("nij,mj->nmi", C, src) + r[:, None, :]
    res = np.sum((mapped - tgt[None, :, :]) ** 2, axis=2)  # (it, n)
    inl = res < inlier_sq_threshold
    inl[~ok] = False
    counts = inl.sum(axis=1)
    tot = np.where(inl, res, 0.0).sum(axis=1)
    # max count, then min total inlier residual, then first iteration
    order = np.lexsort((np.arange(iterations), tot, -counts))
    best = order[0]
    if counts[best] < 3:
        raise NoConsensus(f"best consensus has {int(counts[best])} pairs")
    return inl[best]


def keypoint_loss(T: Transform, pairs: list[MatchedPair]) -> float:
    """Sum of squared target-space residuals over inlier pairs."""
    total = 0.0
    for p in pairs:
        if p.inlier:
            e = T.apply(p.p_s) - p.p_t
            total += float(np.dot(e, e))
    return total


def stereo_disparity_search(
    left: np.ndarray,
    right: np.ndarray,
    q: np.ndarray,
    patch: int = 5,
    max_disparity: int = 64,
) -> float:
    """1-D correlation search along the epipolar row of the right image.

    Fallback for frames with no rendered disparity channel. Returns the
    sub-pixel disparity with the highest patch correlation (parabolic
    refinement), or 0.0 when no displacement correlates.
    """
    h, w = left.shape
    u, v = int(round(float(q[0]))), int(round(float(q[1])))
    r = patch // 2
    if not (r <= v < h - r and r <= u < w - r):
        return 0.0
    ref = left[v - r : v + r + 1, u - r : u + r + 1].astype(np.float64).reshape(-1)
    scores = []
    ds = []
    for d in range(0, min(max_disparity, u - r) + 1):
        cand = right[v - r : v + r + 1, u - d - r : u - d + r + 1]
        cand = cand.astype(np.float64).reshape(-1)
        scores.append(zncc(ref, cand))
        ds.append(d)
    if not scores:
        return 0.0
    scores = np.asarray(scores)
    k = int(np.argmax(scores))
    if scores[k] <= 0.0:
        return 0.0
    if 0 < k < len(scores) - 1:
        denom = scores[k - 1] - 2.0 * scores[k] + scores[k + 1]
        if denom < 0.0:
            return ds[k] + 0.5 * (scores[k - 1] - scores[k + 1]) / denom
    return float(ds[k])


def sample_disparity(disparity: np.ndarray, q: np.ndarray) -> float:
    """Disparity lookup at sub-pixel (u, v); OutOfBounds outside the map.

    Bilinear over the valid neighbors only: entries <= 0 mean no stereo
    match there, and blending them in would corrupt the depth of points
    near the edge of the measured region. Weights are renormalized over
    the valid corners; if none are valid the lookup returns 0.0, which the
    caller's minimum-disparity filter rejects.
    """
    h, w = disparity.shape
    u, v = float(q[0]), float(q[1])
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfBounds(f"({u:.2f}, {v:.2f}) outside {w}x{h} disparity map")
    u0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    u1 = min(u0 + 1, w - 1)
    v1 = min(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    vals = np.array([disparity[v0, u0], disparity[v0, u1],
                     disparity[v1, u0], disparity[v1, u1]], dtype=np.float64)
    wts = np.array([(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv),
                    (1.0 - fu) * fv, fu * fv])
    wts[vals <= 0.0] = 0.0
    tot = wts.sum()
    if tot <= 0.0:
        return 0.0
    return float(wts @ vals / tot)


def estimate_pose(
    src_map: FeatureMap,
    tgt_map: FeatureMap,
    cam: StereoCamera,
    params: PoseParams = PoseParams(),
    *,
    src_disparity: np.ndarray | None = None,
    tgt_disparity: np.ndarray | None = None,
    src_stereo: tuple[np.ndarray, np.ndarray] | None = None,
    tgt_stereo: tuple[np.ndarray, np.ndarray] | None = None,
) -> PoseEstimate:
    """Full source-to-target pose pipeline.

    Detect source keypoints, then soft-match each detected descriptor into
    both maps with the same operator: the source map gives the refined
    source coordinate, the target map the matched target coordinate. Using
    one operator on both sides cancels the soft-argmax support bias, and a
    frame matched against itself reproduces its own coordinates exactly.
    Both sides are backprojected through their disparity source (rendered
    channel, else stereo search), matches with disparity at or below d_min
    are dropped, RANSAC with uniform fit weights selects a consensus, and
    the final weighted alignment over it reports the keypoint loss.
    """
    kps = detect_keypoints(src_map, params.cell)
    if not kps:
        raise TooFewValidDepths("no keypoints detected")
    desc = np.stack([k.descriptor for k in kps])
    q_s, _ = soft_match_many(desc, src_map, params.tau, params.stride)
    q_t, _ = soft_match_many(desc, tgt_map, params.tau, params.stride)

    def disp_at(disparity, stereo, q):
        if disparity is not None:
            return sample_disparity(disparity, q)
        if stereo is not None:
            return stereo_disparity_search(stereo[0], stereo[1], q)
        raise TooFewValidDepths("no disparity source provided")

    pairs: list[MatchedPair] = []
    for k, kp in enumerate(kps):
        d_s = disp_at(src_disparity, src_stereo, q_s[k])
        d_t = disp_at(tgt_disparity, tgt_stereo, q_t[k])
        if d_s <= params.d_min or d_t <= params.d_min:
            continue
        desc_s, score_s = bilinear_sample(src_map, q_s[k])
        desc_t, score_t = bilinear_sample(tgt_map, q_t[k])
        p_s = cam.backproject(np.array([q_s[k][0], q_s[k][1], d_s]))
        p_t = cam.backproject(np.array([q_t[k][0], q_t[k][1], d_t]))
        w = match_weight(desc_s, desc_t, score_s, score_t)
        pairs.append(MatchedPair(
            p_s=p_s, p_t=p_t, uv_det=kp.uv.copy(),
            q_s=q_s[k].copy(), q_t=q_t[k].copy(),
            desc_s=desc_s, desc_t=desc_t,
            score_s=score_s, score_t=score_t, weight=w,
        ))

    pairs = _dedupe_pairs(pairs)
    if len(pairs) < 3:
        raise TooFewValidDepths(f"only {len(pairs)} matches with usable disparity")

    flags = ransac(pairs, params.ransac_iterations,
                   params.inlier_sq_threshold, params.seed)
    for p, f in zip(pairs, flags):
        p.inlier = bool(f)
    inliers = [p for p in pairs if p.inlier]
    T = weighted_alignment(inliers)
    loss = keypoint_loss(T, pairs)
    residuals = np.array([
        float(np.sum((T.apply(p.p_s) - p.p_t) ** 2)) for p in pairs
    ])
    return PoseEstimate(
        transform=T,
        inlier_count=len(inliers),
        loss=loss,
        residuals=residuals,
        pairs=pairs,
    )
