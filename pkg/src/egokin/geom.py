"""Rigid-transform math: SE(3) poses as unit quaternion + translation.

Conventions used throughout the package:
  - quaternions are (w, x, y, z) with w >= 0 after canonicalization,
  - translations are 3-vectors in meters,
  - twists stack (angular, linear) and map to/from poses via exp/log.

All operations are pure; poses are treated as immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9
ANGLE_NEAR_PI_TOL = 1e-6


class AngleNearPi(ValueError):
    """Raised by log() when the rotation angle is within tolerance of pi."""


def _canonicalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if not math.isfinite(n) or n < 1e-12:
        raise ValueError(f"quaternion norm {n} is not normalizable")
    if abs(n - 1.0) > QUAT_NORM_TOL:
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by unit quaternion q (w,x,y,z)."""
    w = q[0]
    u = q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = math.sqrt(float(axis @ axis))
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    s = math.sin(half) / n
    return np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


@dataclass(frozen=True, eq=False)
class Twist:
    """Tangent-space element: angular part in rad, linear part in meters."""

    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        ang = np.asarray(self.angular, dtype=np.float64).reshape(3)
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(ang)) and np.all(np.isfinite(lin))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "angular", ang)
        object.__setattr__(self, "linear", lin)

    def as_vector(self) -> np.ndarray:
        """Stacked (linear; angular) 6-vector, the IK error layout."""
        return np.concatenate([self.linear, self.angular])


@dataclass(frozen=True, eq=False)
class Se3Pose:
    """Rigid transform: unit quaternion (w,x,y,z, w>=0) + translation (m)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "quat", _canonicalize(q))
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Se3Pose":
        return Se3Pose()

    @staticmethod
    def from_parts(quat, trans) -> "Se3Pose":
        return Se3Pose(np.asarray(quat, dtype=np.float64), np.asarray(trans, dtype=np.float64))

    @staticmethod
    def from_axis_angle(axis, angle: float, trans=(0.0, 0.0, 0.0)) -> "Se3Pose":
        return Se3Pose(quat_from_axis_angle(np.asarray(axis, dtype=np.float64), angle),
                       np.asarray(trans, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def apply(self, point: np.ndarray) -> np.ndarray:
        """Map a point from this pose's frame into the parent frame."""
        return quat_rotate(self.quat, np.asarray(point, dtype=np.float64)) + self.trans

    def as_7vec(self) -> np.ndarray:
        """(w, x, y, z, tx, ty, tz) layout used by chain files and episodes."""
        return np.concatenate([self.quat, self.trans])

    def rotation_angle(self) -> float:
        w = min(1.0, abs(float(self.quat[0])))
        return 2.0 * math.acos(w)

    def is_close(self, other: "Se3Pose", tol: float = 1e-9) -> bool:
        dq = min(
            float(np.max(np.abs(self.quat - other.quat))),
            float(np.max(np.abs(self.quat + other.quat))),
        )
        return dq <= tol and float(np.max(np.abs(self.trans - other.trans))) <= tol


def compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    """Frame composition: apply a, then b expressed in a's frame."""
    return Se3Pose(quat_mul(a.quat, b.quat), quat_rotate(a.quat, b.trans) + a.trans)


def inverse(t: Se3Pose) -> Se3Pose:
    qi = np.array([t.quat[0], -t.quat[1], -t.quat[2], -t.quat[3]])
    return Se3Pose(qi, -quat_rotate(qi, t.trans))


def relative_to(child_world: Se3Pose, parent_world: Se3Pose) -> Se3Pose:
    """Express child_world in parent_world's frame: compose(parent, result) == child."""
    return compose(inverse(parent_world), child_world)


def _so3_log(q: np.ndarray) -> np.ndarray:
    # atan2 form stays well conditioned near identity, unlike acos(w)
    w = float(q[0])
    s = math.sqrt(float(q[1:] @ q[1:]))
    angle = 2.0 * math.atan2(s, w)
    if angle >= math.pi - ANGLE_NEAR_PI_TOL:
        raise AngleNearPi(f"rotation angle {angle} within {ANGLE_NEAR_PI_TOL} of pi")
    if s < 1e-12:
        # small-angle: q[1:] ~ axis * angle/2
        return 2.0 * q[1:]
    return (angle / s) * q[1:]


def log(t: Se3Pose) -> Twist:
    """SE(3) logarithm. Rejects rotations within 1e-6 rad of pi."""
    omega = _so3_log(t.quat)
    angle = math.sqrt(float(omega @ omega))
    V_inv = _left_jacobian_inverse(omega, angle)
    return Twist(angular=omega, linear=V_inv @ t.trans)


def exp(x: Twist) -> Se3Pose:
    """SE(3) exponential, inverse of log()."""
    omega = x.angular
    angle = math.sqrt(float(omega @ omega))
    q = quat_from_axis_angle(omega, angle) if angle > 0.0 else np.array([1.0, 0.0, 0.0, 0.0])
    V = _left_jacobian(omega, angle)
    return Se3Pose(q, V @ x.linear)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _left_jacobian(omega: np.ndarray, angle: float) -> np.ndarray:
    K = _skew(omega)
    K2 = K @ K
    a2 = angle * angle
    if angle < 1e-3:
        # series: the closed forms cancel catastrophically near zero
        return np.eye(3) + (0.5 - a2 / 24.0) * K + (1.0 / 6.0 - a2 / 120.0) * K2
    return (
        np.eye(3)
        + ((1.0 - math.cos(angle)) / a2) * K
        + ((angle - math.sin(angle)) / (a2 * angle)) * K2
    )


def _left_jacobian_inverse(omega: np.ndarray, angle: float) -> np.ndarray:
    K = _skew(omega)
    K2 = K @ K
    a2 = angle * angle
    if angle < 1e-3:
        return np.eye(3) - 0.5 * K + (1.0 / 12.0 + a2 / 720.0) * K2
    coeff = (1.0 - (angle * math.sin(angle)) / (2.0 * (1.0 - math.cos(angle)))) / a2
    return np.eye(3) - 0.5 * K + coeff * K2
