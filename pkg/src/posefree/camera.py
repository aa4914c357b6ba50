"""Pinhole cameras, world-to-camera poses, rays and pose error measures.

Conventions: a pose maps a world point ``x`` to camera coordinates
``R @ x + t``; the camera looks down +z with +x right and +y down.  Pixel
``(i, j)`` has its center at continuous image coordinate ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    def __init__(self, depth):
        super().__init__(f"point is behind the camera (depth={depth:.6g})")
        self.depth = depth


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]

    @classmethod
    def from_list(cls, v) -> "Intrinsics":
        fx, fy, cx, cy, w, h = v
        return cls(float(fx), float(fy), float(cx), float(cy), int(w), int(h))

    @classmethod
    def default(cls, size: int) -> "Intrinsics":
        f = 1.2 * size
        return cls(f, f, size / 2.0, size / 2.0, size, size)


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def is_valid(self, tol=1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) < tol)

    def to_dict(self) -> dict:
        return {"R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float]


def project(pose: Pose, intr: Intrinsics, p) -> np.ndarray:
    X, Y, Z = pose.apply(np.asarray(p, dtype=np.float64))
    if Z <= 0:
        raise BehindCameraError(Z)
    return np.array([intr.fx * X / Z + intr.cx, intr.fy * Y / Z + intr.cy])


def project_points(pose: Pose, intr: Intrinsics, pts, min_depth=None) -> np.ndarray:
    """Vectorized projection of (..., 3) points; optional depth floor."""
    cam = pose.apply(pts)
    z = cam[..., 2]
    if min_depth is not None:
        z = np.maximum(z, min_depth)
    return np.stack([intr.fx * cam[..., 0] / z + intr.cx, intr.fy * cam[..., 1] / z + intr.cy], axis=-1)


def pixel_directions(pose: Pose, intr: Intrinsics, uv) -> np.ndarray:
    """Unit world-space directions through continuous pixel coordinates (..., 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[..., 0] - intr.cx) / intr.fx,
                      (uv[..., 1] - intr.cy) / intr.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
    d = d_cam @ pose.R  # R^T applied to row vectors
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(pose: Pose, intr: Intrinsics, u: float, v: float) -> Ray:
    d = pixel_directions(pose, intr, np.array([u, v]))
    return Ray(pose.center, d, (float(u), float(v)))


def pixel_centers(h: int, w: int, top=0, left=0) -> np.ndarray:
    """(h, w, 2) continuous (u, v) coordinates of pixel centers."""
    vv, uu = np.meshgrid(np.arange(top, top + h) + 0.5, np.arange(left, left + w) + 0.5, indexing="ij")
    return np.stack([uu, vv], axis=-1)


def relative_pose(reference: Pose, other: Pose) -> Pose:
    """The ``y`` with ``y ∘ reference == other``."""
    return other.compose(reference.inverse())


def rotation_error(Ra, Rb) -> float:
    """Geodesic angle between two rotations in degrees."""
    M = np.asarray(Ra).T @ np.asarray(Rb)
    # atan2 keeps precision near 0 and 180 degrees where arccos does not
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def translation_error(ta, tb) -> float:
    return float(np.linalg.norm(np.asarray(ta) - np.asarray(tb)))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(w) -> np.ndarray:
    """Rodrigues formula; accepts (3,) or (..., 3)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(th)) / th ** 2)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-4:
        # near pi: axis from the symmetric part
        S = (R + R.T) / 2.0 - c * np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[k] / np.sqrt(max(S[k, k], 1e-300))
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if axis @ s < 0:
            axis = -axis
        return axis / np.linalg.norm(axis) * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(theta)) * theta


def quaternion_to_matrix(q) -> np.ndarray:
    """(w, x, y, z) quaternion, normalized internally."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, dtype=np.float64)
    return q if q[0] >= 0 else -q


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose of a camera at ``center`` looking at ``target``.

    Falls back to up=(1,0,0) when the view direction is nearly parallel to ``up``.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(z @ up / np.linalg.norm(up)) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)
