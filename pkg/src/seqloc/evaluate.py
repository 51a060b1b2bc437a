"""Ground-truth evaluation.

This module is the only code that reads gt.jsonl. The localization pipeline
itself never imports it for computation; training accepts an evaluation
callback built here so error columns can be reported without the trainer
ever touching ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataset
from .geometry import Transform, rotation_angle


@dataclass
class GroundTruth:
    """Per-experience camera-to-world poses and route arc lengths."""

    poses: list[list[Transform]]
    arcs: list[np.ndarray]

    def pose(self, eid: int, fidx: int) -> Transform:
        return self.poses[eid][fidx]

    def arc(self, eid: int, fidx: int) -> float:
        return float(self.arcs[eid][fidx])

    def relative(self, ea: int, fa: int, eb: int, fb: int) -> Transform:
        """Transform mapping frame (ea, fa) camera points into (eb, fb)."""
        return self.poses[eb][fb].inverse().compose(self.poses[ea][fa])


def load_ground_truth(path: str | Path) -> GroundTruth:
    """Read gt.jsonl for every experience directory under path."""
    path = Path(path)
    poses: list[list[Transform]] = []
    arcs: list[np.ndarray] = []
    eid = 0
    while (path / f"exp_{eid}").is_dir():
        gt_path = path / f"exp_{eid}" / "gt.jsonl"
        try:
            lines = gt_path.read_text().splitlines()
        except OSError as e:
            raise CorruptDataset(f"{gt_path}: {e}") from e
        exp_poses: list[Transform] = []
        exp_arcs: list[float] = []
        for line in lines:
            try:
                row = json.loads(line)
                exp_poses.append(Transform.from_json(row))
                exp_arcs.append(float(row["arc_m"]))
            except (ValueError, KeyError) as e:
                raise CorruptDataset(f"{gt_path}: {e}") from e
        poses.append(exp_poses)
        arcs.append(np.asarray(exp_arcs))
        eid += 1
    if not poses:
        raise CorruptDataset(f"{path}: no experience directories with gt.jsonl")
    return GroundTruth(poses=poses, arcs=arcs)


def pose_errors(estimate: Transform, truth: Transform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    err = estimate.compose(truth.inverse())
    rot = float(np.rad2deg(rotation_angle(err.C)))
    trans = float(np.linalg.norm(estimate.r - truth.r))
    return rot, trans


def best_alignment(query_arcs: np.ndarray, ref_arcs: np.ndarray) -> np.ndarray:
    """Index of the arc-nearest reference frame for each query frame."""
    q = np.asarray(query_arcs)[:, None]
    r = np.asarray(ref_arcs)[None, :]
    return np.argmin(np.abs(q - r), axis=1)


def arc_offsets(gt: GroundTruth, pairs) -> np.ndarray:
    """Absolute route-position gap for (exp_a, frame_a, exp_b, frame_b) rows."""
    out = np.empty(len(pairs))
    for i, (ea, fa, eb, fb) in enumerate(pairs):
        out[i] = abs(gt.arc(ea, fa) - gt.arc(eb, fb))
    return out


def make_eval_hook(gt: GroundTruth):
    """Callback for the trainer: (pair, transform) -> (rot_deg, trans_m)."""

    def hook(pair, transform: Transform) -> tuple[float, float]:
        ea, fa, eb, fb = pair
        return pose_errors(transform, gt.relative(ea, fa, eb, fb))

    return hook


EVAL_HEADER = ["pair", "rot_err_deg", "trans_err_m", "inliers"]


def save_eval(path: str | Path, rows: list[tuple[str, float, float, int]]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(EVAL_HEADER)
        for name, rot, trans, inl in rows:
            wr.writerow([name, repr(float(rot)), repr(float(trans)), int(inl)])
