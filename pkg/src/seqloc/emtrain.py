"""EM refinement of a trainable descriptor model.

The model is a bank of prototype descriptors plus per-prototype score
logits. A fixed assignment function maps local intensity statistics to a
sparse prototype mixture per pixel, so descriptors are linear in the
prototypes and every gradient is available in closed form, verified against
a central finite-difference oracle.

E-step: run the pose pipeline on model-produced maps and freeze the
transform, the inlier selection, and the source keypoints. M-step: gradient
descent on the keypoint loss through soft matching, bilinear sampling, and
backprojection, with backtracking on the step size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter

from .errors import (CorruptDataset, DegenerateGeometry, NoConsensus,
                     NonFiniteGradient, TooFewValidDepths)
from .features import VAR_FLOOR, FeatureMap
from .geometry import StereoCamera
from .pose import PoseEstimate, PoseParams, estimate_pose
from .simworld import Dataset

SLDM_MAGIC = b"SLDM"
SLDM_VERSION = 1
_PROJECTION_SEED = 9127
_STATS_FLOOR = 0.02
_DISP_GUARD = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    prototypes: int = 48
    dim: int = 48
    stats_window: int = 9
    assign_temp: float = 8.0
    top_m: int = 48
    saliency_gain: float = 3.0
    init_shared: float = 0.0


@dataclass
class DescriptorModel:
    """Prototype bank (K, D) plus per-prototype score logits (K,)."""

    prototypes: np.ndarray
    score_logits: np.ndarray
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def theta(self) -> np.ndarray:
        """Flat parameter vector: prototypes row-major, then score logits."""
        return np.concatenate([self.prototypes.reshape(-1), self.score_logits])

    def with_theta(self, theta: np.ndarray) -> "DescriptorModel":
        k, d = self.prototypes.shape
        return DescriptorModel(
            prototypes=theta[: k * d].reshape(k, d).copy(),
            score_logits=theta[k * d :].copy(),
            config=self.config,
        )


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> DescriptorModel:
    """Seeded initialization; a shared component keeps early prototypes
    correlated, which training must pull apart."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    shared = rng.standard_normal(config.dim)
    protos = config.init_shared * shared[None, :] + rng.standard_normal(
        (config.prototypes, config.dim)
    )
    return DescriptorModel(
        prototypes=protos,
        score_logits=np.ones(config.prototypes),
        config=config,
    )


def save_model(path: str | Path, model: DescriptorModel) -> None:
    with open(path, "wb") as f:
        f.write(SLDM_MAGIC)
        f.write(struct.pack("<HII", SLDM_VERSION, model.K, model.dim))
        f.write(model.prototypes.astype("<f4").tobytes())
        f.write(model.score_logits.astype("<f4").tobytes())


def load_model(path: str | Path, config: ModelConfig | None = None) -> DescriptorModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorruptDataset(f"{path}: {e}") from e
    head = struct.calcsize("<HII")
    if len(data) < 4 + head or data[:4] != SLDM_MAGIC:
        raise CorruptDataset(f"{path}: not a model file")
    version, k, d = struct.unpack("<HII", data[4 : 4 + head])
    if version != SLDM_VERSION:
        raise CorruptDataset(f"{path}: unsupported model version {version}")
    payload = data[4 + head :]
    if len(payload) != (k * d + k) * 4:
        raise CorruptDataset(f"{path}: truncated model payload")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    cfg = config or ModelConfig(prototypes=k, dim=d)
    if (cfg.prototypes, cfg.dim) != (k, d):
        cfg = replace(cfg, prototypes=k, dim=d)
    return DescriptorModel(
        prototypes=flat[: k * d].reshape(k, d),
        score_logits=flat[k * d :],
        config=cfg,
    )


# ------------------------------------------------------------- assignment

def _projection_matrix(k: int, dim: int) -> np.ndarray:
    """Fixed patch-to-prototype template bank, reproducible without storage."""
    rng = np.random.default_rng(np.random.SeedSequence([_PROJECTION_SEED, k, dim]))
    B = rng.standard_normal((k, dim))
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    return B


@dataclass
class AssignmentMaps:
    """Per-pixel mixture weights (H*W, K), saliency and signal gate (H, W).

    All depend only on the image and the model configuration, never on the
    trainable parameters.
    """

    weights: np.ndarray
    saliency: np.ndarray
    gate: np.ndarray
    shape: tuple[int, int]


def compute_assignment(image: np.ndarray, config: ModelConfig) -> AssignmentMaps:
    img = np.asarray(image, dtype=np.float64) / 255.0
    h, w = img.shape
    win = config.stats_window
    r = win // 2
    padded = np.pad(img, r, mode="edge")
    patches = sliding_window_view(padded, (win, win)).reshape(h * w, win * win)
    # mean-free soft-normalized patches: invariant to local brightness and
    # per-element relighting where the signal is strong, while flat patches
    # shrink toward zero instead of amplifying quantization noise
    patches = patches - patches.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(patches, axis=1, keepdims=True)
    gate = (norm / (norm + _STATS_FLOOR)).reshape(-1)
    stats = patches / (norm + _STATS_FLOOR)

    B = _projection_matrix(config.prototypes, win * win)
    logits = config.assign_temp * (stats @ B.T)  # (H*W, K)

    m = min(config.top_m, config.prototypes)
    idx = np.argpartition(-logits, m - 1, axis=1)[:, :m]
    rows = np.arange(h * w)[:, None]
    top = logits[rows, idx]
    top = top - top.max(axis=1, keepdims=True)
    e = np.exp(top)
    e /= e.sum(axis=1, keepdims=True)
    # gating scales flat regions toward the zero descriptor, which the
    # correlation floor then drops from matching entirely
    weights = np.zeros_like(logits)
    weights[rows, idx] = e * gate[:, None]

    mean = uniform_filter(img, win, mode="nearest")
    sq = uniform_filter(img * img, win, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    std_flat = std.reshape(-1)
    sal = (std_flat - std_flat.mean()) / (std_flat.std() + 1e-8)
    saliency = (config.saliency_gain * sal).reshape(h, w)
    return AssignmentMaps(weights=weights, saliency=saliency,
                          gate=gate.reshape(h, w), shape=(h, w))


def forward(model: DescriptorModel, image: np.ndarray,
            assign: AssignmentMaps | None = None) -> FeatureMap:
    """Model descriptors, scores, and detection logits for one image."""
    if assign is None:
        assign = compute_assignment(image, model.config)
    h, w = assign.shape
    desc = (assign.weights @ model.prototypes).reshape(h, w, model.dim)
    scores = 1.0 / (1.0 + np.exp(-(assign.weights @ model.score_logits)))
    scores = scores.reshape(h, w) * assign.gate
    return FeatureMap(
        descriptors=desc.astype(np.float32),
        scores=scores.astype(np.float32),
        detect_logits=assign.saliency.astype(np.float32),
    )


# ------------------------------------------------------------------ steps

@dataclass
class FramePair:
    """Everything the EM steps need for one (source, target) frame pair."""

    src_image: np.ndarray
    tgt_image: np.ndarray
    src_disparity: np.ndarray
    tgt_disparity: np.ndarray
    src_assign: AssignmentMaps | None = None
    tgt_assign: AssignmentMaps | None = None

    def ensure_assignments(self, config: ModelConfig) -> None:
        if self.src_assign is None:
            self.src_assign = compute_assignment(self.src_image, config)
        if self.tgt_assign is None:
            self.tgt_assign = compute_assignment(self.tgt_image, config)


@dataclass
class EStepResult:
    """Frozen pose, inlier selection, and source keypoints for one M-step."""

    estimate: PoseEstimate
    q_s: np.ndarray       # (N, 2) source keypoint positions
    p_s: np.ndarray       # (N, 3) backprojected source points
    a_s: np.ndarray       # (N, K) effective source assignment rows
    inlier: np.ndarray    # (N,) bool


def _bilinear_assignment_rows(assign: AssignmentMaps, q: np.ndarray) -> np.ndarray:
    """Effective mixture weights at sub-pixel positions (N, 2) -> (N, K)."""
    h, w = assign.shape
    A = assign.weights
    u = q[:, 0]
    v = q[:, 1]
    u0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    i00 = v0 * w + u0
    i01 = v0 * w + u1
    i10 = v1 * w + u0
    i11 = v1 * w + u1
    top = A[i00] * (1.0 - fu) + A[i01] * fu
    bot = A[i10] * (1.0 - fu) + A[i11] * fu
    return top * (1.0 - fv) + bot * fv


def e_step(model: DescriptorModel, pair: FramePair, cam: StereoCamera,
           params: PoseParams = PoseParams()) -> EStepResult:
    """Pose pipeline on model maps; freezes what the M-step must hold fixed."""
    pair.ensure_assignments(model.config)
    src_map = forward(model, pair.src_image, pair.src_assign)
    tgt_map = forward(model, pair.tgt_image, pair.tgt_assign)
    est = estimate_pose(
        src_map, tgt_map, cam, params,
        src_disparity=pair.src_disparity, tgt_disparity=pair.tgt_disparity,
    )
    q_s = np.stack([p.q_s for p in est.pairs])
    p_s = np.stack([p.p_s for p in est.pairs])
    inlier = np.array([p.inlier for p in est.pairs], dtype=bool)
    # assignment rows at the raw detection positions: the matching
    # descriptor is sampled there, while anchors use the refined points
    uv_det = np.stack([p.uv_det for p in est.pairs])
    a_s = _bilinear_assignment_rows(pair.src_assign, uv_det)
    return EStepResult(estimate=est, q_s=q_s, p_s=p_s, a_s=a_s, inlier=inlier)


def _normalize_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean unit-variance rows; rows under the variance floor zero out.

    Returns (normalized, sigma, live) where live marks rows above the floor.
    """
    c = X - X.mean(axis=1, keepdims=True)
    var = np.mean(c * c, axis=1)
    live = var >= VAR_FLOOR
    sigma = np.sqrt(np.where(live, var, 1.0))
    n = np.where(live[:, None], c / sigma[:, None], 0.0)
    return n, sigma, live


def _masked_bilinear_disparity(
    disp: np.ndarray, qu: np.ndarray, qv: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Valid-corner bilinear disparity with analytic position derivatives.

    Mirrors pose.sample_disparity: corners <= 0 carry no weight and the
    remaining weights renormalize. Returns (delta, ddelta/du, ddelta/dv);
    positions whose corners are all invalid yield delta = 0.
    """
    h, w = disp.shape
    u0 = np.clip(np.floor(qu).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(qv).astype(int), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = qu - u0
    fv = qv - v0
    g = np.stack([disp[v0, u0], disp[v0, u1], disp[v1, u0], disp[v1, u1]])
    m = (g > 0.0).astype(np.float64)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]) * m
    dw_du = np.stack([-(1 - fv), (1 - fv), -fv, fv]) * m
    dw_dv = np.stack([-(1 - fu), -fu, (1 - fu), fu]) * m
    W = wts.sum(axis=0)
    S = (wts * g).sum(axis=0)
    bad = W <= 0.0
    Wsafe = np.where(bad, 1.0, W)
    delta = np.where(bad, 0.0, S / Wsafe)
    dS_du = (dw_du * g).sum(axis=0)
    dW_du = dw_du.sum(axis=0)
    dS_dv = (dw_dv * g).sum(axis=0)
    dW_dv = dw_dv.sum(axis=0)
    ddel_du = np.where(bad, 0.0, (dS_du * Wsafe - S * dW_du) / (Wsafe * Wsafe))
    ddel_dv = np.where(bad, 0.0, (dS_dv * Wsafe - S * dW_dv) / (Wsafe * Wsafe))
    return delta, ddel_du, ddel_dv


def _keypoint_objective(
    P: np.ndarray,
    pair: FramePair,
    frozen: EStepResult,
    cam: StereoCamera,
    tau: float,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Keypoint loss over frozen inliers, and its prototype gradient.

    Only the transform and the inlier selection are frozen: both matched
    positions are live functions of the prototypes, re-derived by
    soft-matching each detection descriptor into the source and target
    maps. Keeping both sides live matters; with the source points frozen
    the cheapest descent direction is to blur every descriptor until the
    matched coordinates drift toward the image centroid, which destroys
    the model. With both sides live that drift moves source and target
    points together and the frozen transform keeps them apart, so descent
    has to sharpen matches instead. Differentiates through the descriptor
    normalization, the correlation softmax, the coordinate average, the
    valid-corner disparity lookup, and backprojection on both sides.
    """
    A_s = pair.src_assign.weights   # (M, K)
    A_t = pair.tgt_assign.weights
    h, w = pair.tgt_assign.shape
    D = P.shape[1]
    mask = frozen.inlier
    if not np.any(mask):
        return 0.0, (np.zeros_like(P) if want_grad else None)

    a_det = frozen.a_s[mask]        # (N, K) rows at the detection positions
    T = frozen.estimate.transform

    D_s = A_s @ P
    D_t = A_t @ P
    Vs, sig_vs, live_vs = _normalize_rows(D_s)
    Vt, sig_vt, live_vt = _normalize_rows(D_t)
    d_q = a_det @ P                 # (N, D)
    Un, sig_q, live_q = _normalize_rows(d_q)

    z_s = np.clip(Un @ Vs.T / D, -1.0, 1.0)     # (N, M)
    z_t = np.clip(Un @ Vt.T / D, -1.0, 1.0)

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    cu_flat = uu.reshape(-1)
    cv_flat = vv.reshape(-1)

    def soft_coords(z):
        zmax = z.max(axis=1, keepdims=True)
        ew = np.exp(tau * (z - zmax))
        wgt = ew / ew.sum(axis=1, keepdims=True)
        return wgt, wgt @ cu_flat, wgt @ cv_flat

    wgt_s, qu_s, qv_s = soft_coords(z_s)
    wgt_t, qu_t, qv_t = soft_coords(z_t)

    disp_s = pair.src_disparity.astype(np.float64)
    disp_t = pair.tgt_disparity.astype(np.float64)
    del_s, dds_du, dds_dv = _masked_bilinear_disparity(disp_s, qu_s, qv_s)
    del_t, ddt_du, ddt_dv = _masked_bilinear_disparity(disp_t, qu_t, qv_t)
    if np.any(del_s <= _DISP_GUARD) or np.any(del_t <= _DISP_GUARD):
        return float("inf"), (np.zeros_like(P) if want_grad else None)

    kappa = cam.fu / cam.fv

    def backproject(qu, qv, delta):
        s = cam.b / delta
        return np.stack([s * (qu - cam.cu), s * kappa * (qv - cam.cv),
                         s * np.full_like(qu, cam.fu)], axis=1)

    p_s = backproject(qu_s, qv_s, del_s)        # (N, 3)
    p_t = backproject(qu_t, qv_t, del_t)

    err = p_s @ T.C.T + T.r - p_t               # (N, 3)
    loss = float(np.sum(err * err))
    if not want_grad:
        return loss, None

    dL_dps = 2.0 * err @ T.C                    # (N, 3)
    dL_dpt = -2.0 * err

    def coord_grads(dL_dp, p, delta, qu, ddel_du, ddel_dv):
        s = cam.b / delta
        dp_du = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
        dp_dv = np.stack([np.zeros_like(s), s * kappa, np.zeros_like(s)], axis=1)
        ddelta_term = -p / delta[:, None]
        gu = np.sum(dL_dp * (dp_du + ddelta_term * ddel_du[:, None]), axis=1)
        gv = np.sum(dL_dp * (dp_dv + ddelta_term * ddel_dv[:, None]), axis=1)
        return gu, gv

    gu_s, gv_s = coord_grads(dL_dps, p_s, del_s, qu_s, dds_du, dds_dv)
    gu_t, gv_t = coord_grads(dL_dpt, p_t, del_t, qu_t, ddt_du, ddt_dv)

    def softmax_backward(wgt, qu, qv, gu, gv):
        dot = gu[:, None] * (cu_flat[None, :] - qu[:, None]) \
            + gv[:, None] * (cv_flat[None, :] - qv[:, None])
        return tau * wgt * dot                  # (N, M) = dL/dz

    sg_s = softmax_backward(wgt_s, qu_s, qv_s, gu_s, gv_s)
    sg_t = softmax_backward(wgt_t, qu_t, qv_t, gu_t, gv_t)

    def map_side(sgrad, Vn, sig, live, A):
        Y = sgrad.T @ Un / D                    # (M, D)
        ydot = np.sum(Vn * Y, axis=1)
        G = Y - Y.mean(axis=1, keepdims=True) - Vn * (ydot / D)[:, None]
        G = np.where(live[:, None], G / sig[:, None], 0.0)
        return A.T @ G                          # (K, D)

    grad = map_side(sg_s, Vs, sig_vs, live_vs, A_s)
    grad += map_side(sg_t, Vt, sig_vt, live_vt, A_t)

    # query descriptor feeds both correlation fields
    Yq = (sg_s @ Vs + sg_t @ Vt) / D            # (N, D)
    ydot_q = np.sum(Un * Yq, axis=1)
    G_q = Yq - Yq.mean(axis=1, keepdims=True) - Un * (ydot_q / D)[:, None]
    G_q = np.where(live_q[:, None], G_q / sig_q[:, None], 0.0)
    grad += a_det.T @ G_q

    return loss, grad


def m_step(
    model: DescriptorModel,
    pair: FramePair,
    frozen: EStepResult,
    lr: float,
    steps: int = 1,
    cam: StereoCamera | None = None,
    tau: float = 10.0,
) -> tuple[DescriptorModel, float, float]:
    """Backtracking gradient descent on the frozen-pose keypoint loss.

    Each accepted step strictly decreases the loss; a step that fails to
    after 5 halvings leaves the model unchanged. Returns (model, loss
    before the first step, loss after the last accepted step).
    """
    if cam is None:
        raise ValueError("m_step needs the camera model")
    pair.ensure_assignments(model.config)
    P = model.prototypes.copy()
    first = None
    current = None
    for _ in range(max(steps, 0)):
        loss0, grad = _keypoint_objective(P, pair, frozen, cam, tau, want_grad=True)
        if first is None:
            first = loss0
        current = loss0
        if not np.isfinite(loss0):
            break
        if grad is None or not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("keypoint loss gradient is not finite")
        step_lr = lr
        accepted = False
        for _ in range(6):  # initial step plus up to 5 halvings
            P_try = P - step_lr * grad
            loss1, _ = _keypoint_objective(P_try, pair, frozen, cam, tau, want_grad=False)
            if loss1 < loss0:
                P = P_try
                current = loss1
                accepted = True
                break
            step_lr *= 0.5
        if not accepted:
            break
    out = DescriptorModel(prototypes=P, score_logits=model.score_logits.copy(),
                          config=model.config)
    return out, float(first if first is not None else np.nan), float(current)


def finite_diff_grad(lossfn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (lossfn(tp) - lossfn(tm)) / (2.0 * h)
    return g


def model_objective(model: DescriptorModel, pair: FramePair, frozen: EStepResult,
                    cam: StereoCamera, tau: float = 10.0):
    """Loss as a function of the flat parameter vector, plus its gradient.

    The score logits take no gradient from the keypoint loss (the frozen
    pose carries their only influence), so their block is zero.
    """
    k, d = model.prototypes.shape

    def lossfn(theta: np.ndarray) -> float:
        P = np.asarray(theta[: k * d], dtype=np.float64).reshape(k, d)
        val, _ = _keypoint_objective(P, pair, frozen, cam, tau, want_grad=False)
        return val

    def gradfn(theta: np.ndarray) -> np.ndarray:
        P = np.asarray(theta[: k * d], dtype=np.float64).reshape(k, d)
        _, g = _keypoint_objective(P, pair, frozen, cam, tau, want_grad=True)
        return np.concatenate([g.reshape(-1), np.zeros(k)])

    return lossfn, gradfn


# ------------------------------------------------------------------ train

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 2.0
    steps: int = 2
    prototypes: int = 48
    dim: int = 48
    tau: float = 60.0
    cell: int = 8
    d_min: float = 0.5
    ransac_iterations: int = 300
    inlier_sq_threshold: float = 0.03


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_inliers: float
    mean_rot_err_deg: float
    mean_trans_err_m: float
    skipped: int


@dataclass
class TrainReport:
    rows: list[EpochStats]


REPORT_HEADER = ["epoch", "mean_loss", "mean_inliers",
                 "mean_rot_err_deg", "mean_trans_err_m", "skipped"]


def save_report(path: str | Path, report: TrainReport) -> None:
    import csv

    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(REPORT_HEADER)
        for r in report.rows:
            wr.writerow([r.epoch, repr(r.mean_loss), repr(r.mean_inliers),
                         repr(r.mean_rot_err_deg), repr(r.mean_trans_err_m),
                         r.skipped])


def load_report(path: str | Path) -> TrainReport:
    import csv

    rows: list[EpochStats] = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rd:
            rows.append(EpochStats(int(row[0]), float(row[1]), float(row[2]),
                                   float(row[3]), float(row[4]), int(row[5])))
    return TrainReport(rows)


def _pair_data(dataset: Dataset, cache: dict, pair: tuple[int, int, int, int],
               config: ModelConfig) -> FramePair:
    ea, fa, eb, fb = pair

    def frame_bits(eid: int, fidx: int):
        key = (eid, fidx)
        if key not in cache:
            img = dataset.experience(eid).frames[fidx].left
            disp = dataset.disparity(eid, fidx)
            cache[key] = (img, disp, compute_assignment(img, config))
        return cache[key]

    src = frame_bits(ea, fa)
    tgt = frame_bits(eb, fb)
    return FramePair(
        src_image=src[0], tgt_image=tgt[0],
        src_disparity=src[1], tgt_disparity=tgt[1],
        src_assign=src[2], tgt_assign=tgt[2],
    )


def train(
    dataset: Dataset,
    pairs: list[tuple[int, int, int, int]],
    epochs: int | None = None,
    seed: int = 0,
    config: TrainConfig = TrainConfig(),
    eval_hook=None,
) -> tuple[DescriptorModel, TrainReport]:
    """Alternate E and M steps over shuffled pairs.

    Row 0 of the report is a no-update baseline sweep; rows 1..epochs train.
    Pairs whose E-step finds no consensus are skipped and counted. The
    optional eval_hook(pair, transform) -> (rot_err_deg, trans_err_m) fills
    the evaluation columns; without it they are NaN. Deterministic in
    (dataset, pairs, seed, config).
    """
    n_epochs = config.epochs if epochs is None else epochs
    mcfg = ModelConfig(prototypes=config.prototypes, dim=config.dim)
    model = init_model(mcfg, seed)
    if n_epochs == 0:
        return model, TrainReport(rows=[])

    cam = dataset.camera
    cache: dict = {}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    rows: list[EpochStats] = []
    for epoch in range(n_epochs + 1):
        order = rng.permutation(len(pairs)) if epoch > 0 else np.arange(len(pairs))
        losses: list[float] = []
        inliers: list[int] = []
        rots: list[float] = []
        trans: list[float] = []
        skipped = 0
        for idx in order:
            fpair = _pair_data(dataset, cache, pairs[idx], mcfg)
            pp = PoseParams(
                cell=config.cell, tau=config.tau, d_min=config.d_min,
                ransac_iterations=config.ransac_iterations,
                inlier_sq_threshold=config.inlier_sq_threshold,
                seed=int(np.random.SeedSequence([seed, 29, epoch, int(idx)])
                         .generate_state(1)[0]),
            )
            try:
                res = e_step(model, fpair, cam, pp)
            except (NoConsensus, TooFewValidDepths, DegenerateGeometry):
                skipped += 1
                continue
            losses.append(res.estimate.loss)
            inliers.append(res.estimate.inlier_count)
            if eval_hook is not None:
                r_err, t_err = eval_hook(pairs[idx], res.estimate.transform)
                rots.append(r_err)
                trans.append(t_err)
            if epoch > 0:
                model, _, _ = m_step(model, fpair, res, lr=config.lr,
                                     steps=config.steps, cam=cam, tau=config.tau)
        rows.append(EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            mean_inliers=float(np.mean(inliers)) if inliers else float("nan"),
            mean_rot_err_deg=float(np.mean(rots)) if rots else float("nan"),
            mean_trans_err_m=float(np.mean(trans)) if trans else float("nan"),
            skipped=skipped,
        ))
    return model, TrainReport(rows=rows)
