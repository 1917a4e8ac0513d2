"""Euler-angle conventions and the 2x3 orthogonal projector.

The projector ``M(theta)`` maps a 3D object-domain point onto the detector
plane.  Its closed form uses ``C_i = cos(theta_i)`` and ``S_i = sin(theta_i)``::

    [[ C1 C2 C3 - S1 S3,  C3 S1 + C1 C2 S3, -C1 S2],
     [-C1 S3 - C2 C3 S1,  C1 C3 - C2 S1 S3,  S1 S2]]

With this closed form ``theta1`` rotates the detector frame within the
projection plane (the row span of ``M`` does not depend on it), while
``(theta2, theta3)`` fix the viewing direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def _wrap_2pi(x: float) -> float:
    y = math.fmod(x, TWO_PI)
    if y < 0.0:
        y += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if y >= TWO_PI:
        y = 0.0
    return y


def canonicalize(theta1: float, theta2: float, theta3: float) -> tuple[float, float, float]:
    """Wrap an Euler triple into ``[0, 2pi) x [0, pi] x [0, 2pi)``.

    ``theta2`` outside ``[0, pi]`` is reflected with the double-cover identity
    ``(t1, t2, t3) ~ (t1 + pi, -t2, t3 + pi)``, which leaves the projector
    unchanged.
    """
    t2 = _wrap_2pi(theta2)
    if t2 > math.pi:
        t2 = TWO_PI - t2
        theta1 = theta1 + math.pi
        theta3 = theta3 + math.pi
    return _wrap_2pi(theta1), t2, _wrap_2pi(theta3)


@dataclass(frozen=True)
class EulerAngles:
    """Orientation ``(theta1, theta2, theta3)`` in radians, always canonical."""

    theta1: float
    theta2: float
    theta3: float

    def __post_init__(self):
        t1, t2, t3 = canonicalize(float(self.theta1), float(self.theta2), float(self.theta3))
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)
        object.__setattr__(self, "theta3", t3)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3])

    @classmethod
    def from_array(cls, a) -> "EulerAngles":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class InPlaneShift:
    """In-plane translation ``(t1, t2)`` in detector units."""

    t1: float = 0.0
    t2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.t1) and math.isfinite(self.t2)):
            raise ValueError(f"shift must be finite, got ({self.t1}, {self.t2})")

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2])


@dataclass(frozen=True)
class Pose:
    """Latent variables of one projection."""

    angles: EulerAngles
    shift: InPlaneShift = InPlaneShift()

    def as_array(self) -> np.ndarray:
        """Return ``[theta1, theta2, theta3, t1, t2]``."""
        return np.concatenate([self.angles.as_array(), self.shift.as_array()])

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(EulerAngles(a[0], a[1], a[2]), InPlaneShift(float(a[3]), float(a[4])))


def poses_to_array(poses) -> np.ndarray:
    """Stack poses into a ``(P, 5)`` float array."""
    if len(poses) == 0:
        return np.zeros((0, 5))
    return np.stack([p.as_array() for p in poses])


def poses_from_array(arr) -> list[Pose]:
    return [Pose.from_array(row) for row in np.asarray(arr, dtype=float)]


def _angles(angles) -> tuple[float, float, float]:
    if isinstance(angles, EulerAngles):
        return angles.theta1, angles.theta2, angles.theta3
    a = np.asarray(angles, dtype=float)
    return float(a[0]), float(a[1]), float(a[2])


def projection_matrix(angles) -> np.ndarray:
    """Return the 2x3 orthogonal projector for ``angles``."""
    t1, t2, t3 = _angles(angles)
    c1, c2, c3 = math.cos(t1), math.cos(t2), math.cos(t3)
    s1, s2, s3 = math.sin(t1), math.sin(t2), math.sin(t3)
    return np.array(
        [
            [c1 * c2 * c3 - s1 * s3, c3 * s1 + c1 * c2 * s3, -c1 * s2],
            [-c1 * s3 - c2 * c3 * s1, c1 * c3 - c2 * s1 * s3, s1 * s2],
        ]
    )


def projection_matrix_derivative(angles, axis: int) -> np.ndarray:
    """Entry-wise derivative of :func:`projection_matrix` w.r.t. ``theta_axis``.

    ``axis`` is 1, 2 or 3.
    """
    t1, t2, t3 = _angles(angles)
    c1, c2, c3 = math.cos(t1), math.cos(t2), math.cos(t3)
    s1, s2, s3 = math.sin(t1), math.sin(t2), math.sin(t3)
    if axis == 1:
        return np.array(
            [
                [-s1 * c2 * c3 - c1 * s3, c3 * c1 - s1 * c2 * s3, s1 * s2],
                [s1 * s3 - c2 * c3 * c1, -s1 * c3 - c2 * c1 * s3, c1 * s2],
            ]
        )
    if axis == 2:
        return np.array(
            [
                [-c1 * s2 * c3, -c1 * s2 * s3, -c1 * c2],
                [s2 * c3 * s1, s2 * s1 * s3, s1 * c2],
            ]
        )
    if axis == 3:
        return np.array(
            [
                [-c1 * c2 * s3 - s1 * c3, -s3 * s1 + c1 * c2 * c3, 0.0],
                [-c1 * c3 + c2 * s3 * s1, -c1 * s3 - c2 * s1 * c3, 0.0],
            ]
        )
    raise ValueError(f"axis must be 1, 2 or 3, got {axis}")


def rotation_matrix(angles) -> np.ndarray:
    """Complete the projector to a proper 3x3 rotation (third row = viewing axis)."""
    m = projection_matrix(angles)
    return np.vstack([m, np.cross(m[0], m[1])])


def angles_from_rotation(r: np.ndarray) -> EulerAngles:
    """Inverse of :func:`rotation_matrix`."""
    r = np.asarray(r, dtype=float)
    # R[0,2] = -C1 S2, R[1,2] = S1 S2, R[2,2] = C2
    # R[2,0] = S2 C3,  R[2,1] = S2 S3
    t2 = math.acos(min(1.0, max(-1.0, r[2, 2])))
    if math.sin(t2) > 1e-9:
        t1 = math.atan2(r[1, 2], -r[0, 2])
        t3 = math.atan2(r[2, 1], r[2, 0])
    else:
        # gimbal lock: only t1 +/- t3 is defined; put everything into t1
        t3 = 0.0
        t1 = math.atan2(r[0, 1], r[0, 0]) if r[2, 2] > 0 else math.atan2(r[0, 1], -r[0, 0])
    return EulerAngles(t1, t2, t3)


def wrap_angle_difference(d):
    """Wrap angle differences into ``(-pi, pi]``."""
    d = np.asarray(d, dtype=float)
    w = np.mod(d + math.pi, TWO_PI) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def geodesic_distance(a, b) -> float:
    """Rotation angle (radians) between the orientations ``a`` and ``b``."""
    ra, rb = rotation_matrix(a), rotation_matrix(b)
    cos = (np.trace(ra @ rb.T) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos)))


def fit_global_rotation(true_angles, est_angles) -> np.ndarray:
    """Least-squares rotation ``G`` with ``R_est @ G ~= R_true`` over all poses."""
    acc = np.zeros((3, 3))
    for t, e in zip(true_angles, est_angles):
        acc += rotation_matrix(e).T @ rotation_matrix(t)
    u, _, vt = np.linalg.svd(acc)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def align_to(true_angles, est_angles) -> list[EulerAngles]:
    """Remove the best global rotation from ``est_angles``."""
    g = fit_global_rotation(true_angles, est_angles)
    return [angles_from_rotation(rotation_matrix(e) @ g) for e in est_angles]
