"""Planar and spatial pose types shared by every stage of the pipeline.

Heading convention (used everywhere in the package): a planar heading
``theta`` is measured from the +y axis towards +x, so a vehicle with heading
``theta`` moves along ``(sin(theta), cos(theta))``.  Positive ``theta`` is a
right (clockwise, seen from above) turn.  KITTI camera poses map onto this
plane as ``x -> x`` and ``z -> y`` (camera y points down).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    # angles already in range pass through untouched (the shift above rounds)
    wrapped = np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class MotionDelta:
    """Relative motion ``T = [delta_d, delta_theta]`` between two frames."""

    delta_d: float
    delta_theta: float

    def __post_init__(self):
        if not (math.isfinite(self.delta_d) and math.isfinite(self.delta_theta)):
            raise ValueError(f"non-finite motion delta {self}")
        if self.delta_d < 0:
            raise ValueError(f"delta_d must be >= 0, got {self.delta_d}")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_d, self.delta_theta])


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def forward(self) -> np.ndarray:
        return np.array([math.sin(self.theta), math.cos(self.theta)])

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 3x3 SE(2) matrix whose body x-axis is the forward direction."""
        return se2_matrix(self.x, self.y, self.theta)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2D":
        return cls(float(m[0, 2]), float(m[1, 2]), math.atan2(m[0, 0], m[1, 0]))

    def relative_to(self, origin: "Pose2D") -> "Pose2D":
        """This pose expressed in a frame where ``origin`` sits at (0, 0, 0)."""
        m = se2_matrix(0.0, 0.0, 0.0) @ se2_inverse(origin.as_matrix()) @ self.as_matrix()
        return Pose2D.from_matrix(m)

    def to_pose3d(self) -> "Pose3D":
        """Embed in the KITTI camera convention (rotation about the down axis)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return Pose3D(rot, np.array([self.x, 0.0, self.y]))


def se2_matrix(x: float, y: float, theta: float) -> np.ndarray:
    # body x = forward = (sin theta, cos theta); body y = left = (-cos theta, sin theta)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[s, -c, x], [c, s, y], [0.0, 0.0, 1.0]])


def se2_inverse(m: np.ndarray) -> np.ndarray:
    r = m[:2, :2]
    out = np.eye(3)
    out[:2, :2] = r.T
    out[:2, 2] = -r.T @ m[:2, 2]
    return out


def se2_angle(m: np.ndarray) -> float:
    """Rotation angle of an SE(2) matrix (counter-clockwise positive)."""
    return math.atan2(m[1, 0], m[0, 0])


@dataclass(frozen=True, eq=False)
class Pose3D:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, Pose3D):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    @classmethod
    def identity(cls) -> "Pose3D":
        return cls(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def planar_position(self) -> np.ndarray:
        """Ground-plane position (camera x, camera z)."""
        return np.array([self.translation[0], self.translation[2]])

    @property
    def planar_heading(self) -> float:
        fwd = self.rotation[:, 2]
        return math.atan2(fwd[0], fwd[2])

    def to_pose2d(self) -> Pose2D:
        x, y = self.planar_position
        return Pose2D(float(x), float(y), self.planar_heading)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def relative_motion(prev: Pose3D, cur: Pose3D) -> MotionDelta:
    """Planar travelled distance and heading change between two poses."""
    d = float(np.hypot(*(cur.planar_position - prev.planar_position)))
    dtheta = wrap_angle(cur.planar_heading - prev.planar_heading)
    return MotionDelta(d, dtheta)


def relative_motion_2d(prev: Pose2D, cur: Pose2D) -> MotionDelta:
    d = math.hypot(cur.x - prev.x, cur.y - prev.y)
    return MotionDelta(d, wrap_angle(cur.theta - prev.theta))
