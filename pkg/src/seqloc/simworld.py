"""Multi-experience stereo world simulator.

A world is a gently curving route through a field of point landmarks. Each
experience retraverses the same route with jittered frame spacing and a
different appearance value; appearance changes image photometry only (global
gain, per-landmark contrast, an additive shadow ramp), never landmark
positions. Frames come with stereo intensity images, noisy odometry edges,
dense ground-truth descriptor/score/logit maps, and a dense disparity map.
Ground-truth poses are written to a separate gt.jsonl that the pipeline
never reads; only evaluation code touches it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, InvalidConfig, MissingVO
from .features import FeatureMap
from .formats import read_pgm, read_slfm, write_pgm, write_slfm
from .geometry import StereoCamera, Transform, rotation_from_axis_angle

Z_MIN = 0.5
ATTEN_Z = 4.0        # depth of half brightness
ATTEN_MIN = 0.15     # landmarks attenuated below this fraction are skipped
SPLAT_SIGMA = 1.3
SPLAT_MASK_RADIUS = 3.0
POS_ENCODE_GAIN = 4.0
TEXTURE_DEPTH_1 = 0.35
TEXTURE_DEPTH_2 = 0.25
TEXTURE_FREQ = (0.9, 1.6)  # rad/px, below Nyquist
BACKGROUND_LEVEL = 0.12
BACKGROUND_LOGIT = -4.0
ROT_NOISE_DEG = 0.5

DEFAULT_CAMERA = StereoCamera(fu=60.0, fv=60.0, cu=32.0, cv=24.0,
                              b=0.25, width=64, height=48)


@dataclass(frozen=True)
class SimConfig:
    """Dataset generation parameters.

    route_length_m of None derives a route giving roughly 0.5 m frame
    spacing. appearance_step is the monotone appearance gap between
    consecutive experiences.
    """

    num_experiences: int = 6
    frames_per_experience: int = 60
    appearance_step: float = 0.1
    drift: float = 0.01
    frame_jitter: int = 3
    route_length_m: float | None = None
    station_spacing_m: float = 0.9
    landmarks_per_station: int = 4
    descriptor_dim: int = 32
    camera: StereoCamera = field(default_factory=lambda: DEFAULT_CAMERA)
    emit_dense_maps: bool = False

    def __post_init__(self) -> None:
        if self.num_experiences < 2:
            raise InvalidConfig("need at least 2 experiences")
        if self.frames_per_experience < 20:
            raise InvalidConfig("need at least 20 frames per experience")
        if not (0.0 <= self.appearance_step <= 1.0):
            raise InvalidConfig("appearance_step must be in [0, 1]")
        if self.drift < 0.0:
            raise InvalidConfig("drift must be non-negative")
        if self.frame_jitter < 0 or self.frame_jitter >= self.frames_per_experience // 2:
            raise InvalidConfig("frame_jitter must be small and non-negative")
        if self.descriptor_dim < 2:
            raise InvalidConfig("descriptor_dim must be >= 2")

    @property
    def route_length(self) -> float:
        if self.route_length_m is not None:
            return float(self.route_length_m)
        return 0.5 * (self.frames_per_experience - 1)


@dataclass
class World:
    """Landmark field plus a densely sampled reference trajectory."""

    positions: np.ndarray        # (L, 3)
    base_intensity: np.ndarray   # (L,)
    contrast: np.ndarray         # (L, 2) appearance-interpolated gain range
    descriptors: np.ndarray      # (L, D)
    pos_encode: np.ndarray       # (2, D) in-splat position encoding directions
    texture: np.ndarray          # (L, 6) two wave vectors and phases per landmark
    trajectory: list[Transform]
    route_s: np.ndarray          # arc length grid for pose_at
    route_pos: np.ndarray        # (S, 3)
    route_heading: np.ndarray    # (S,)

    def pose_at(self, s: float) -> Transform:
        """Camera-to-world pose at arc length s along the route."""
        x = np.interp(s, self.route_s, self.route_pos[:, 0])
        y = np.interp(s, self.route_s, self.route_pos[:, 1])
        z = np.interp(s, self.route_s, self.route_pos[:, 2])
        psi = np.interp(s, self.route_s, self.route_heading)
        return Transform(_heading_rotation(psi), np.array([x, y, z]))


def _heading_rotation(psi: float) -> np.ndarray:
    """Yaw about the (downward) y axis; heading 0 is world +z."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def generate_world(config: SimConfig, seed: int) -> World:
    """Build the landmark field and reference route for a configuration."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    length = config.route_length

    n_dense = 1024
    t = np.linspace(0.0, 1.0, n_dense)
    psi = 0.35 * np.sin(np.pi * t)
    ds = length / (n_dense - 1)
    dx = np.sin(psi) * ds
    dz = np.cos(psi) * ds
    x = np.concatenate([[0.0], np.cumsum(dx[1:])])
    z = np.concatenate([[0.0], np.cumsum(dz[1:])])
    route_pos = np.stack([x, np.zeros(n_dense), z], axis=1)
    route_s = t * length

    n_stations = int(np.ceil(length / config.station_spacing_m)) + 1
    stations = np.linspace(0.0, length, n_stations)
    per = config.landmarks_per_station
    L = n_stations * per

    lateral = rng.uniform(-2.4, 2.4, L)
    vertical = rng.uniform(-0.9, 0.9, L)
    ahead = rng.uniform(2.5, 8.0, L)
    base = rng.uniform(0.35, 0.75, L)
    contrast = rng.uniform(0.7, 1.0, (L, 2))
    descriptors = rng.standard_normal((L, config.descriptor_dim))
    pos_encode = rng.standard_normal((2, config.descriptor_dim))
    pos_encode /= np.linalg.norm(pos_encode, axis=1, keepdims=True)

    freq = rng.uniform(*TEXTURE_FREQ, (L, 2))
    ang = rng.uniform(0.0, 2.0 * np.pi, (L, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, (L, 2))
    texture = np.stack([
        freq[:, 0] * np.cos(ang[:, 0]), freq[:, 0] * np.sin(ang[:, 0]), phase[:, 0],
        freq[:, 1] * np.cos(ang[:, 1]), freq[:, 1] * np.sin(ang[:, 1]), phase[:, 1],
    ], axis=1)

    positions = np.empty((L, 3))
    for k, s in enumerate(stations):
        psi_k = float(np.interp(s, route_s, psi))
        origin = np.array([
            np.interp(s, route_s, route_pos[:, 0]),
            0.0,
            np.interp(s, route_s, route_pos[:, 2]),
        ])
        R = _heading_rotation(psi_k)
        for m in range(per):
            i = k * per + m
            local = np.array([lateral[i], vertical[i], ahead[i]])
            positions[i] = origin + R @ local

    world = World(
        positions=positions,
        base_intensity=base,
        contrast=contrast,
        descriptors=descriptors,
        pos_encode=pos_encode,
        texture=texture,
        trajectory=[],
        route_s=route_s,
        route_pos=route_pos,
        route_heading=psi,
    )
    world.trajectory = [world.pose_at(s) for s in np.linspace(0.0, length, 256)]

    if L < 50:
        raise InvalidConfig(f"only {L} landmarks; need at least 50")
    cam = config.camera
    for pose in world.trajectory:
        if _count_visible(world, pose, cam) < 8:
            raise InvalidConfig("a trajectory pose sees fewer than 8 landmarks")
    return world


def _count_visible(world: World, pose: Transform, cam: StereoCamera) -> int:
    p = pose.inverse().apply(world.positions)
    z = p[:, 2]
    atten = 1.0 / (1.0 + (z / ATTEN_Z) ** 2)
    ok = (z > Z_MIN) & (atten >= ATTEN_MIN)
    u = cam.fu * p[ok, 0] / z[ok] + cam.cu
    v = cam.fv * p[ok, 1] / z[ok] + cam.cv
    inside = (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return int(np.count_nonzero(inside))


def render_frame(
    world: World,
    pose: Transform,
    appearance: float,
    cam: StereoCamera,
    *,
    noise_seed: int = 0,
    want_maps: bool = True,
) -> tuple[np.ndarray, np.ndarray, FeatureMap | None, np.ndarray]:
    """Render one stereo frame plus dense ground-truth maps.

    Returns (left u8, right u8, feature map or None, disparity float32).
    Appearance modulates photometry only; splat centers depend only on pose.
    """
    h, w = cam.height, cam.width
    a = float(appearance)

    p = pose.inverse().apply(world.positions)
    z = p[:, 2]
    visible = np.flatnonzero(z > Z_MIN)
    order = visible[np.argsort(-z[visible])]  # far to near; near overwrites

    gain = 1.0 - 0.3 * a
    phi = 2.0 * np.pi * a
    uu = (np.arange(w) / (w - 1) - 0.5)[None, :]
    vv = (np.arange(h) / (h - 1) - 0.5)[:, None]
    shadow = 0.18 * a * (uu * np.cos(phi) + vv * np.sin(phi))
    left = np.full((h, w), BACKGROUND_LEVEL) + shadow
    right = left.copy()

    if want_maps:
        rng = np.random.default_rng(np.random.SeedSequence([noise_seed, 17]))
        d_dim = world.descriptors.shape[1]
        desc = rng.standard_normal((h, w, d_dim)).astype(np.float32)
        score = np.zeros((h, w), dtype=np.float32)
        logits = np.full((h, w), BACKGROUND_LOGIT, dtype=np.float32)
    disparity = np.zeros((h, w), dtype=np.float32)

    two_sigma_sq = 2.0 * SPLAT_SIGMA * SPLAT_SIGMA
    r_draw = int(np.ceil(4.0 * SPLAT_SIGMA))
    mask_r_sq = SPLAT_MASK_RADIUS * SPLAT_MASK_RADIUS

    for i in order:
        zi = z[i]
        atten = 1.0 / (1.0 + (zi / ATTEN_Z) ** 2)
        if atten < ATTEN_MIN:
            continue
        u = cam.fu * p[i, 0] / zi + cam.cu
        v = cam.fv * p[i, 1] / zi + cam.cv
        d = cam.fu * cam.b / zi
        amp = atten * world.base_intensity[i] * gain * (
            world.contrast[i, 0] + (world.contrast[i, 1] - world.contrast[i, 0]) * a
        )
        _splat_intensity(left, u, v, amp, r_draw, two_sigma_sq, world.texture[i])
        _splat_intensity(right, u - d, v, amp, r_draw, two_sigma_sq, world.texture[i])
        win = _window(u, v, SPLAT_MASK_RADIUS, w, h)
        if win is None:
            continue
        x0, x1, y0, y1 = win
        px, py = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        rsq = (px - u) ** 2 + (py - v) ** 2
        m = rsq <= mask_r_sq
        if not np.any(m):
            continue
        disparity[y0:y1, x0:x1][m] = d
        if want_maps:
            kernel = np.exp(-rsq[m] / two_sigma_sq)
            # descriptors vary linearly across the splat so sub-pixel
            # positions inside it are distinguishable, like real texture
            du = ((px - u) / SPLAT_MASK_RADIUS)[m]
            dv = ((py - v) / SPLAT_MASK_RADIUS)[m]
            local = (world.descriptors[i][None, :]
                     + POS_ENCODE_GAIN * du[:, None] * world.pos_encode[0]
                     + POS_ENCODE_GAIN * dv[:, None] * world.pos_encode[1])
            desc[y0:y1, x0:x1][m] = local.astype(np.float32)
            score[y0:y1, x0:x1][m] = (atten * kernel).astype(np.float32)
            # peak height grows with attenuation so the nearest landmark
            # dominates detection in cells holding several splats
            logits[y0:y1, x0:x1][m] = ((8.0 + 6.0 * atten) * kernel - 4.0).astype(np.float32)

    left_u8 = np.round(np.clip(left, 0.0, 1.0) * 255.0).astype(np.uint8)
    right_u8 = np.round(np.clip(right, 0.0, 1.0) * 255.0).astype(np.uint8)
    fmap = FeatureMap(desc, score, logits) if want_maps else None
    return left_u8, right_u8, fmap, disparity


def _window(u: float, v: float, r: float, w: int, h: int):
    x0 = max(int(np.floor(u - r)), 0)
    x1 = min(int(np.ceil(u + r)) + 1, w)
    y0 = max(int(np.floor(v - r)), 0)
    y1 = min(int(np.ceil(v + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


def _splat_intensity(canvas, u, v, amp, r_draw, two_sigma_sq, tex) -> None:
    h, w = canvas.shape
    win = _window(u, v, r_draw, w, h)
    if win is None:
        return
    x0, x1, y0, y1 = win
    px, py = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    du = px - u
    dv = py - v
    rsq = du * du + dv * dv
    # per-landmark micro pattern rides the envelope and moves with the splat,
    # giving each landmark an identity that survives per-landmark relighting
    pattern = (1.0
               + TEXTURE_DEPTH_1 * np.sin(tex[0] * du + tex[1] * dv + tex[2])
               + TEXTURE_DEPTH_2 * np.sin(tex[3] * du + tex[4] * dv + tex[5]))
    canvas[y0:y1, x0:x1] += amp * np.exp(-rsq / two_sigma_sq) * pattern


def simulated_vo(poses: list[Transform], drift: float, seed: int) -> list[Transform]:
    """Odometry edges between consecutive poses with multiplicative noise.

    Edge n maps frame n coordinates into frame n+1. Translation noise scales
    with step length, rotation noise with a fixed per-edge angle, both times
    drift; drift 0 reproduces the relative ground truth exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    edges: list[Transform] = []
    for n in range(1, len(poses)):
        rel = poses[n].inverse().compose(poses[n - 1])
        step = np.linalg.norm(poses[n].r - poses[n - 1].r)
        w = rng.normal(0.0, drift * np.deg2rad(ROT_NOISE_DEG), 3)
        eps = rng.normal(0.0, drift * step, 3)
        noise = Transform(rotation_from_axis_angle(w), eps)
        edges.append(rel.compose(noise))
    return edges


@dataclass
class Frame:
    """One stereo observation; gt_pose is populated only by evaluation code."""

    index: int
    left: np.ndarray
    right: np.ndarray
    vo_edge: Transform | None
    gt_pose: Transform | None = None


@dataclass
class Experience:
    id: int
    appearance: float
    frames: list[Frame]

    def __len__(self) -> int:
        return len(self.frames)

    def vo_edge_into(self, index: int) -> Transform:
        """Edge mapping frame index-1 coordinates into frame index."""
        if index < 1 or index >= len(self.frames):
            raise MissingVO(f"no odometry edge into frame {index}")
        edge = self.frames[index].vo_edge
        if edge is None:
            raise MissingVO(f"frame {index} has no odometry edge")
        return edge


@dataclass
class Dataset:
    path: Path | None
    camera: StereoCamera
    appearances: list[float]
    experiences: list[Experience]
    descriptor_dim: int
    seed: int

    def experience(self, eid: int) -> Experience:
        for e in self.experiences:
            if e.id == eid:
                return e
        raise KeyError(f"no experience {eid}")

    def _frame_file(self, eid: int, fidx: int, suffix: str) -> Path:
        if self.path is None:
            raise CorruptDataset("dataset has no backing directory")
        return self.path / f"exp_{eid}" / f"frame_{fidx}{suffix}"

    def disparity(self, eid: int, fidx: int) -> np.ndarray:
        arr = read_slfm(self._frame_file(eid, fidx, "_d.slfm"))
        return arr[:, :, 0]

    def feature_map(self, eid: int, fidx: int):
        from .features import load_feature_map

        return load_feature_map(self._frame_file(eid, fidx, ".slfm"))


def _frame_params(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Monotone route parameters in [0, 1], endpoints exact, smoothly warped."""
    base = np.linspace(0.0, 1.0, n_frames)
    amp = 0.012
    phase = rng.uniform(0.0, 2.0 * np.pi)
    freq = rng.uniform(0.8, 1.4)
    t = base + amp * np.sin(np.pi * base) * np.sin(2.0 * np.pi * freq * base + phase)
    spacing = 1.0 / (n_frames - 1)
    noise = rng.normal(0.0, 0.06 * spacing, n_frames)
    noise[0] = 0.0
    noise[-1] = 0.0
    t = t + noise
    t[0], t[-1] = 0.0, 1.0
    if np.any(np.diff(t) <= 0.0):
        raise InvalidConfig("frame parameter jitter produced a non-monotone sweep")
    return t


def generate_dataset(config: SimConfig, seed: int, out_dir: str | Path) -> Dataset:
    """Generate, write, and return a multi-experience dataset.

    Byte-identical output for identical (config, seed). Ground truth goes to
    gt.jsonl only; returned frames keep gt_pose in memory for the simulator's
    own tests but the on-disk pipeline inputs never include it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(config, seed)
    length = config.route_length

    appearances = [round(i * config.appearance_step, 10)
                   for i in range(config.num_experiences)]
    appearances = [min(a, 1.0) for a in appearances]

    experiences: list[Experience] = []
    frame_counts: list[int] = []
    for eid in range(config.num_experiences):
        rng = np.random.default_rng(np.random.SeedSequence([seed, eid, 5]))
        n = config.frames_per_experience
        if config.frame_jitter > 0 and eid > 0:
            n += int(rng.integers(-config.frame_jitter, config.frame_jitter + 1))
        t = _frame_params(n, rng)
        arcs = t * length
        poses = [world.pose_at(s) for s in arcs]
        edges = simulated_vo(poses, config.drift, seed * 1000 + eid)

        exp_dir = out / f"exp_{eid}"
        exp_dir.mkdir(exist_ok=True)
        frames: list[Frame] = []
        for i, pose in enumerate(poses):
            noise_seed = seed * 100000 + eid * 1000 + i
            left, right, fmap, disp = render_frame(
                world, pose, appearances[eid], config.camera,
                noise_seed=noise_seed, want_maps=config.emit_dense_maps,
            )
            write_pgm(exp_dir / f"frame_{i}.pgm", left)
            write_pgm(exp_dir / f"frame_{i}_r.pgm", right)
            write_slfm(exp_dir / f"frame_{i}_d.slfm", disp)
            if fmap is not None:
                from .features import save_feature_map

                save_feature_map(exp_dir / f"frame_{i}.slfm", fmap)
            frames.append(Frame(
                index=i, left=left, right=right,
                vo_edge=None if i == 0 else edges[i - 1],
                gt_pose=pose,
            ))

        with open(exp_dir / "vo.jsonl", "w") as f:
            for e in edges:
                f.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
        with open(exp_dir / "gt.jsonl", "w") as f:
            for pose, s in zip(poses, arcs):
                row = pose.to_json()
                row["arc_m"] = float(s)
                f.write(json.dumps(row, sort_keys=True) + "\n")

        experiences.append(Experience(id=eid, appearance=appearances[eid], frames=frames))
        frame_counts.append(n)

    meta = {
        "version": 1,
        "camera": config.camera.to_json(),
        "M": config.num_experiences,
        "N": config.frames_per_experience,
        "appearances": appearances,
        "frame_counts": frame_counts,
        "descriptor_dim": config.descriptor_dim,
        "seed": seed,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")

    return Dataset(
        path=out,
        camera=config.camera,
        appearances=appearances,
        experiences=experiences,
        descriptor_dim=config.descriptor_dim,
        seed=seed,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory. Never reads gt.jsonl."""
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptDataset(f"{meta_path}: {e}") from e
    for key in ("camera", "M", "N", "appearances", "frame_counts"):
        if key not in meta:
            raise CorruptDataset(f"{meta_path}: missing key {key!r}")

    camera = StereoCamera.from_json(meta["camera"])
    appearances = [float(a) for a in meta["appearances"]]
    counts = [int(c) for c in meta["frame_counts"]]
    if len(counts) != int(meta["M"]) or len(appearances) != int(meta["M"]):
        raise CorruptDataset(f"{meta_path}: inconsistent experience counts")

    experiences: list[Experience] = []
    for eid, count in enumerate(counts):
        exp_dir = path / f"exp_{eid}"
        vo_path = exp_dir / "vo.jsonl"
        try:
            vo_lines = vo_path.read_text().splitlines()
        except OSError as e:
            raise CorruptDataset(f"{vo_path}: {e}") from e
        if len(vo_lines) != count - 1:
            raise CorruptDataset(
                f"{vo_path}: {len(vo_lines)} edges for {count} frames"
            )
        try:
            edges = [Transform.from_json(json.loads(line)) for line in vo_lines]
        except (ValueError, KeyError) as e:
            raise CorruptDataset(f"{vo_path}: {e}") from e

        frames: list[Frame] = []
        for i in range(count):
            left = read_pgm(exp_dir / f"frame_{i}.pgm")
            right = read_pgm(exp_dir / f"frame_{i}_r.pgm")
            frames.append(Frame(
                index=i, left=left, right=right,
                vo_edge=None if i == 0 else edges[i - 1],
            ))
        experiences.append(Experience(
            id=eid, appearance=appearances[eid], frames=frames,
        ))

    return Dataset(
        path=path,
        camera=camera,
        appearances=appearances,
        experiences=experiences,
        descriptor_dim=int(meta.get("descriptor_dim", 32)),
        seed=int(meta.get("seed", 0)),
    )
