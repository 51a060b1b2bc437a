"""Rigid SE(3) transforms and the rectified stereo camera model.

Conventions: rotation matrices act on column vectors, camera frames are
x-right, y-down, z-forward, and image coordinates are (u, v) = (column, row)
with integer coordinates at pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NonPositiveDepth, NonPositiveDisparity

_ORTHO_TOL = 1e-6


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a near-rotation 3x3 matrix onto the closest proper rotation."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle vector (3,) to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    K = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_angle(C: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = (float(np.trace(C)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Transform:
    """Rigid transform p_out = C @ p_in + r.

    The rotation is re-projected onto SO(3) at construction, so composition
    chains cannot drift away from orthonormality.
    """

    C: np.ndarray
    r: np.ndarray

    def __post_init__(self) -> None:
        C = np.asarray(self.C, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64).reshape(3)
        if C.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {C.shape}")
        err = np.max(np.abs(C @ C.T - np.eye(3)))
        if err > _ORTHO_TOL or np.linalg.det(C) < 0.0:
            raise ValueError(f"not a rotation matrix (orthogonality error {err:.3g})")
        if err > 1e-12:
            C = nearest_rotation(C)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "r", r)

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Transform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {M.shape}")
        return Transform(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.C
        M[:3, 3] = self.r
        return M

    def compose(self, other: "Transform") -> "Transform":
        """self applied after other: (self * other)(p) = self(other(p))."""
        return Transform(self.C @ other.C, self.C @ other.r + self.r)

    def inverse(self) -> "Transform":
        return Transform(self.C.T, -self.C.T @ self.r)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return self.C @ p + self.r
        return p @ self.C.T + self.r

    def sq_translation_distance(self) -> float:
        """Squared norm of the translation component."""
        return float(np.dot(self.r, self.r))

    def to_json(self) -> dict:
        return {"matrix": [float(x) for x in self.matrix.reshape(-1)]}

    @staticmethod
    def from_json(obj: dict) -> "Transform":
        flat = np.asarray(obj["matrix"], dtype=np.float64)
        if flat.shape != (16,):
            raise ValueError("transform JSON must hold 16 row-major entries")
        return Transform.from_matrix(flat.reshape(4, 4))


@dataclass(frozen=True)
class StereoCamera:
    """Rectified stereo pair: focal lengths, principal point, baseline, size."""

    fu: float
    fv: float
    cu: float
    cv: float
    b: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if min(self.fu, self.fv, self.b) <= 0.0:
            raise InvalidConfig("focal lengths and baseline must be positive")
        if not (0.0 <= self.cu < self.width and 0.0 <= self.cv < self.height):
            raise InvalidConfig("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise InvalidConfig("image size must be positive")

    def project(self, p: np.ndarray) -> np.ndarray:
        """Camera point(s) to [u, v, d]: pixel in the left image plus disparity.

        Raises NonPositiveDepth if any z <= 0.
        """
        p = np.asarray(p, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0.0):
            raise NonPositiveDepth(f"z must be positive, got min {np.min(z):.4g}")
        u = self.fu * p[..., 0] / z + self.cu
        v = self.fv * p[..., 1] / z + self.cv
        d = self.fu * self.b / z
        return np.stack([u, v, d], axis=-1)

    def backproject(self, y: np.ndarray) -> np.ndarray:
        """Measurement(s) [u, v, d] back to a camera-frame 3D point.

        Raises NonPositiveDisparity if any d <= 0.
        """
        y = np.asarray(y, dtype=np.float64)
        d = y[..., 2]
        if np.any(d <= 0.0):
            raise NonPositiveDisparity(f"disparity must be positive, got min {np.min(d):.4g}")
        s = self.b / d
        x = s * (y[..., 0] - self.cu)
        yy = s * (self.fu / self.fv) * (y[..., 1] - self.cv)
        z = s * self.fu
        return np.stack([x, yy, z], axis=-1)

    def to_json(self) -> dict:
        return {
            "fu": float(self.fu),
            "fv": float(self.fv),
            "cu": float(self.cu),
            "cv": float(self.cv),
            "b": float(self.b),
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_json(obj: dict) -> "StereoCamera":
        return StereoCamera(
            fu=float(obj["fu"]),
            fv=float(obj["fv"]),
            cu=float(obj["cu"]),
            cv=float(obj["cv"]),
            b=float(obj["b"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
        )
