from __future__ import annotations

import filecmp
import json

import numpy as np
import numpy.testing as npt
import pytest

from seqloc.errors import CorruptDataset, InvalidConfig
from seqloc.geometry import StereoCamera, Transform
from seqloc.simworld import (SimConfig, World, generate_dataset,
                             generate_world, load_dataset, render_frame,
                             simulated_vo)


def small_config() -> SimConfig:
    return SimConfig(num_experiences=2, frames_per_experience=20,
                     frame_jitter=1, route_length_m=15.0)


def tree_bytes(root):
    """Map of relative path -> file bytes for a dataset directory."""
    return {p.relative_to(root): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(small_config(), seed=7, out_dir=a)
    generate_dataset(small_config(), seed=7, out_dir=b)
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert list(ta) == list(tb)
    for rel in ta:
        assert ta[rel] == tb[rel], f"{rel} differs between runs"


def test_different_seed_changes_output(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(small_config(), seed=7, out_dir=a)
    generate_dataset(small_config(), seed=8, out_dir=b)
    same = all(ta == tb for ta, tb in zip(tree_bytes(a).values(),
                                          tree_bytes(b).values()))
    assert not same


def test_appearance_drifts_monotonically(dataset):
    apps = [e.appearance for e in dataset.experiences]
    steps = np.diff(apps)
    assert np.all(steps > 0) or np.all(steps < 0)
    assert np.all(np.abs(steps) <= 0.1 + 1e-12)
    assert abs(apps[5] - apps[0]) >= 0.5 - 1e-12


def test_frame_counts_within_jitter(dataset):
    meta = json.loads((dataset.path / "meta.json").read_text())
    cfg = SimConfig()
    for count in meta["frame_counts"]:
        assert abs(count - cfg.frames_per_experience) <= cfg.frame_jitter


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        SimConfig(num_experiences=1)
    with pytest.raises(InvalidConfig):
        SimConfig(frames_per_experience=10)
    with pytest.raises(InvalidConfig):
        SimConfig(appearance_step=1.5)
    with pytest.raises(InvalidConfig):
        SimConfig(drift=-0.1)
    with pytest.raises(InvalidConfig, match="landmarks"):
        generate_world(SimConfig(route_length_m=5.0), seed=42)


def single_landmark_world(z: float) -> World:
    d = 8
    return World(
        positions=np.array([[0.0, 0.0, z]]),
        base_intensity=np.array([0.9]),
        contrast=np.array([[1.0, 1.0]]),
        descriptors=np.ones((1, d)),
        pos_encode=np.zeros((2, d)),
        texture=np.zeros((1, 6)),
        trajectory=[Transform.identity()],
        route_s=np.array([0.0, 1.0]),
        route_pos=np.zeros((2, 3)),
        route_heading=np.zeros(2),
    )


def test_single_landmark_splat_positions(example_cam):
    world = single_landmark_world(z=1.0)
    left, right, fmap, disp = render_frame(world, Transform.identity(), 0.0,
                                           example_cam, noise_seed=0)
    lv, lu = np.unravel_index(np.argmax(left), left.shape)
    rv, ru = np.unravel_index(np.argmax(right), right.shape)
    assert (lu, lv) == (64, 48)
    assert (ru, rv) == (64 - 25, 48)
    assert disp[lv, lu] == pytest.approx(25.0)


def test_rendered_disparity_matches_depth():
    world = generate_world(SimConfig(), seed=42)
    cam = SimConfig().camera
    pose = world.pose_at(8.0)
    _, _, _, disp = render_frame(world, pose, 0.0, cam, noise_seed=0)
    inv = pose.inverse()
    checked = 0
    for p_w in world.positions:
        p = inv.apply(p_w)
        if p[2] <= 0.6:
            continue
        u = cam.fu * p[0] / p[2] + cam.cu
        v = cam.fv * p[1] / p[2] + cam.cv
        if not (2 <= u <= cam.width - 3 and 2 <= v <= cam.height - 3):
            continue
        expected = cam.fu * cam.b / p[2]
        got = disp[int(round(v)), int(round(u))]
        if got <= 0.0 or got > expected + 0.5:
            continue  # faded out, or overwritten by a nearer splat
        assert got == pytest.approx(expected, abs=0.5)
        checked += 1
    assert checked >= 8


def test_appearance_changes_photometry_not_geometry():
    world = generate_world(SimConfig(), seed=42)
    cam = SimConfig().camera
    pose = world.pose_at(8.0)
    left_a, _, _, disp_a = render_frame(world, pose, 0.0, cam, noise_seed=0)
    left_b, _, _, disp_b = render_frame(world, pose, 0.8, cam, noise_seed=0)
    assert np.any(left_a != left_b)
    npt.assert_array_equal(disp_a > 0, disp_b > 0)
    npt.assert_array_equal(disp_a, disp_b)


def test_vo_with_zero_drift_is_exact():
    world = generate_world(SimConfig(), seed=3)
    poses = [world.pose_at(s) for s in np.linspace(0.0, 8.0, 20)]
    edges = simulated_vo(poses, 0.0, seed=1)
    assert len(edges) == len(poses) - 1
    for i, edge in enumerate(edges):
        truth = poses[i + 1].inverse().compose(poses[i])
        npt.assert_allclose(edge.matrix, truth.matrix, atol=1e-12)


def test_vo_drift_compounds_over_the_route():
    world = generate_world(SimConfig(frames_per_experience=100), seed=3)
    poses = [world.pose_at(s) for s in np.linspace(0.0, 20.0, 100)]
    edges = simulated_vo(poses, 0.01, seed=1)
    per_edge = []
    for i, edge in enumerate(edges):
        truth = poses[i + 1].inverse().compose(poses[i])
        per_edge.append(np.linalg.norm(edge.r - truth.r))
    chain = Transform.identity()
    for edge in edges:
        chain = edge.compose(chain)
    truth_chain = poses[-1].inverse().compose(poses[0])
    end_error = np.linalg.norm(chain.r - truth_chain.r)
    assert end_error > 5.0 * np.mean(per_edge)


def test_vo_same_seed_identical():
    world = generate_world(SimConfig(), seed=3)
    poses = [world.pose_at(s) for s in np.linspace(0.0, 8.0, 20)]
    a = simulated_vo(poses, 0.02, seed=9)
    b = simulated_vo(poses, 0.02, seed=9)
    for ea, eb in zip(a, b):
        npt.assert_array_equal(ea.matrix, eb.matrix)


def test_save_load_round_trip(tmp_path):
    out = tmp_path / "ds"
    ds = generate_dataset(small_config(), seed=7, out_dir=out)
    back = load_dataset(out)
    assert back.camera == ds.camera
    assert len(back.experiences) == len(ds.experiences)
    for ea, eb in zip(ds.experiences, back.experiences):
        assert ea.id == eb.id
        assert ea.appearance == pytest.approx(eb.appearance)
        assert len(ea.frames) == len(eb.frames)
        npt.assert_array_equal(ea.frames[3].left, eb.frames[3].left)
        npt.assert_array_equal(ea.frames[3].right, eb.frames[3].right)
        npt.assert_allclose(ea.frames[3].vo_edge.matrix,
                            eb.frames[3].vo_edge.matrix, atol=0)


def test_loaded_dataset_has_no_ground_truth(tmp_path):
    out = tmp_path / "ds"
    generate_dataset(small_config(), seed=7, out_dir=out)
    back = load_dataset(out)
    assert all(f.gt_pose is None
               for e in back.experiences for f in e.frames)


def test_missing_vo_file_raises(tmp_path):
    out = tmp_path / "ds"
    generate_dataset(small_config(), seed=7, out_dir=out)
    (out / "exp_0" / "vo.jsonl").unlink()
    with pytest.raises(CorruptDataset, match="vo.jsonl"):
        load_dataset(out)


def test_truncated_frame_names_the_file(tmp_path):
    out = tmp_path / "ds"
    generate_dataset(small_config(), seed=7, out_dir=out)
    victim = out / "exp_1" / "frame_4.pgm"
    victim.write_bytes(victim.read_bytes()[:-64])
    with pytest.raises(CorruptDataset, match="frame_4.pgm"):
        load_dataset(out)


def test_experience_endpoints_meet_route_endpoints(dataset):
    cfg = SimConfig()
    world = generate_world(cfg, seed=42)
    start = world.pose_at(0.0).r
    end = world.pose_at(cfg.route_length).r
    for exp in dataset.experiences:
        assert np.linalg.norm(exp.frames[0].gt_pose.r - start) < 0.1
        assert np.linalg.norm(exp.frames[-1].gt_pose.r - end) < 0.1
