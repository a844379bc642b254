"""Rigid-body transforms on SE(3) with the planar-shift specialisation.

Tangent vectors are ordered ``[tx, ty, tz, rx, ry, rz]`` (translation first).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-8
_PI_MARGIN = 1e-6
_DRIFT_TOL = 1e-7


class AngleAtBoundary(ValueError):
    """Raised by :func:`log_map` when the rotation angle is within 1e-6 of pi."""


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


@dataclass(frozen=True)
class PlanarShift:
    dx: float
    dy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy])

    def tangent(self) -> np.ndarray:
        return np.array([self.dx, self.dy, 0.0, 0.0, 0.0, 0.0])

    def transform(self) -> RigidTransform:
        return translate(self.dx, self.dy, 0.0)

    @classmethod
    def from_array(cls, v) -> "PlanarShift":
        return cls(float(v[0]), float(v[1]))


def identity() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), np.array([x, y, z], dtype=float))


def from_xy_yaw(x: float, y: float, yaw: float, z: float = 0.0) -> RigidTransform:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rot, np.array([x, y, z], dtype=float))


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Gram-Schmidt re-orthonormalisation of a nearly orthonormal matrix."""
    x = rot[:, 0] / np.linalg.norm(rot[:, 0])
    y = rot[:, 1] - x * (x @ rot[:, 1])
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    rot = a.rotation @ b.rotation
    if np.linalg.norm(rot.T @ rot - np.eye(3)) > _DRIFT_TOL:
        rot = orthonormalize(rot)
    return RigidTransform(rot, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def relative(t_i: RigidTransform, t_j: RigidTransform) -> RigidTransform:
    """Relative transform ``inverse(t_i) * t_j``."""
    return compose(inverse(t_i), t_j)


def hat(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_map(v) -> RigidTransform:
    v = np.asarray(v, dtype=float)
    rho, w = v[:3], v[3:]
    theta = np.linalg.norm(w)
    k = hat(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        a, b, c = 1.0, 0.5, 1.0 / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    rot = np.eye(3) + a * k + b * k2
    jac = np.eye(3) + b * k + c * k2
    return RigidTransform(rot, jac @ rho)


def log_map(t: RigidTransform) -> np.ndarray:
    r = t.rotation
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if np.pi - theta < _PI_MARGIN:
        raise AngleAtBoundary(f"rotation angle {theta!r} too close to pi")
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < _SMALL_ANGLE:
        w = 0.5 * skew
        jac_inv = np.eye(3) - 0.5 * hat(w)
    else:
        w = theta / (2.0 * np.sin(theta)) * skew
        k = hat(w)
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
        jac_inv = np.eye(3) - 0.5 * k + coef * (k @ k)
    return np.concatenate([jac_inv @ t.translation, w])


def apply(t: RigidTransform, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ t.rotation.T + t.translation


def to_pose7(t: RigidTransform) -> np.ndarray:
    """``[tx, ty, tz, qw, qx, qy, qz]`` with a unit quaternion, qw >= 0."""
    qx, qy, qz, qw = Rotation.from_matrix(t.rotation).as_quat()
    q = np.array([qw, qx, qy, qz])
    if q[0] < 0:
        q = -q
    return np.concatenate([t.translation, q])


def from_pose7(values) -> RigidTransform:
    v = np.asarray(values, dtype=float)
    if v.shape != (7,):
        raise ValueError(f"pose needs 7 numbers, got {v.shape}")
    qw, qx, qy, qz = v[3:]
    rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
    return RigidTransform(rot, v[:3])
