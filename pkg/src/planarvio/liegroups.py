"""Small Lie-group toolkit for SO(3), SE(3) and SE(2).

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)`` with the Hamilton product.
* Rotation derivatives use the right (body-frame) perturbation
  ``R @ so3_exp(dtheta)``; SE(2) derivatives use ``P * exp(delta)``.
* Planar twists are ordered ``(v_x, v_y, omega)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6


class DomainError(ValueError):
    """Raised when a map is evaluated outside of its domain."""


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ y == cross(w, y)``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix of the rotation vector ``w`` (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    W = hat(w)
    if th < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (np.sin(th) / th) * W + ((1.0 - np.cos(th)) / (th * th)) * (W @ W)


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_log(q: np.ndarray) -> np.ndarray:
    w = q[0]
    v = q[1:]
    if w < 0:
        w, v = -w, -v
    n = float(np.linalg.norm(v))
    if n < SMALL_ANGLE:
        # second-order expansion of 2*atan2(n, w)/n
        return (2.0 / w) * (1.0 - n * n / (3.0 * w * w)) * v
    th = 2.0 * np.arctan2(n, w)
    axis = v / n
    if np.pi - th < 1e-12:
        # angle pi: axis sign is arbitrary, make it deterministic
        k = int(np.argmax(np.abs(axis)))
        if axis[k] < 0:
            axis = -axis
        th = np.pi
    return th * axis


def so3_log(R) -> np.ndarray:
    """Rotation vector of ``R`` with angle in ``[0, pi]``.

    At exactly ``pi`` the axis is flipped so that its largest-magnitude
    component is positive (ties resolved x, then y, then z).
    """
    if isinstance(R, Rotation3):
        return _quat_log(R.q)
    return _quat_log(_matrix_to_quat(np.asarray(R, dtype=float)))


def so3_right_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    W = hat(w)
    if th < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 6.0
    return (
        np.eye(3)
        - ((1.0 - np.cos(th)) / th**2) * W
        + ((th - np.sin(th)) / th**3) * (W @ W)
    )


def so3_right_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    W = hat(w)
    if th < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 12.0
    c = 1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3) + 0.5 * W + c * (W @ W)


def so3_left_jacobian_inv(w) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(w, dtype=float))


@dataclass(frozen=True)
class Rotation3:
    """Unit quaternion ``(w, x, y, z)``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        q = q / np.linalg.norm(q)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls()

    @classmethod
    def from_matrix(cls, R) -> "Rotation3":
        return cls(_matrix_to_quat(np.asarray(R, dtype=float)))

    @classmethod
    def exp(cls, w) -> "Rotation3":
        w = np.asarray(w, dtype=float)
        th = float(np.linalg.norm(w))
        if th < SMALL_ANGLE:
            return cls(np.concatenate([[1.0 - th * th / 8.0], 0.5 * w]))
        return cls(np.concatenate([[np.cos(th / 2)], np.sin(th / 2) * w / th]))

    def log(self) -> np.ndarray:
        return _quat_log(self.q)

    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def inverse(self) -> "Rotation3":
        return Rotation3(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def __mul__(self, other: "Rotation3") -> "Rotation3":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation3(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform ``x_dst = R x_src + t``."""

    rotation: Rotation3 = field(default_factory=Rotation3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).copy())

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose3":
        return cls(Rotation3.from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose3":
        Ri = self.rotation.inverse()
        return Pose3(Ri, -Ri.rotate(self.translation))

    def __mul__(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    def transform(self, x) -> np.ndarray:
        return self.rotation.rotate(x) + self.translation


def wrap_angle(a: float) -> float:
    """Wrap to ``(-pi, pi]``."""
    a = float(np.mod(a + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if a == -np.pi else a


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class PlanarPose:
    """Element of SE(2): heading ``angle`` and translation ``(x, y)``."""

    angle: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "angle", wrap_angle(self.angle))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def matrix(self) -> np.ndarray:
        M = np.eye(3)
        M[:2, :2] = rot2(self.angle)
        M[:2, 2] = (self.x, self.y)
        return M

    @classmethod
    def from_matrix(cls, M) -> "PlanarPose":
        return cls(np.arctan2(M[1, 0], M[0, 0]), M[0, 2], M[1, 2])

    def __mul__(self, other: "PlanarPose") -> "PlanarPose":
        t = rot2(self.angle) @ other.translation + self.translation
        return PlanarPose(self.angle + other.angle, t[0], t[1])

    def inverse(self) -> "PlanarPose":
        t = -rot2(self.angle).T @ self.translation
        return PlanarPose(-self.angle, t[0], t[1])

    def as_array(self) -> np.ndarray:
        """``(x, y, angle)``, same ordering as a twist."""
        return np.array([self.x, self.y, self.angle])


def se2_hat(xi) -> np.ndarray:
    vx, vy, w = xi
    return np.array([[0.0, -w, vx], [w, 0.0, vy], [0.0, 0.0, 0.0]])


def _se2_V(theta: float) -> np.ndarray:
    if abs(theta) < SMALL_ANGLE:
        a = 1.0 - theta * theta / 6.0
        b = 0.5 * theta
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta
    return np.array([[a, -b], [b, a]])


def se2_exp(xi, dt: float = 1.0) -> PlanarPose:
    """``exp(dt * hat(xi))`` for the twist ``xi = (v_x, v_y, omega)``."""
    if dt < 0:
        raise DomainError("dt must be non-negative")
    rho = dt * np.asarray(xi[:2], dtype=float)
    theta = dt * float(xi[2])
    t = _se2_V(theta) @ rho
    return PlanarPose(theta, t[0], t[1])


def se2_log(P: PlanarPose) -> np.ndarray:
    """Twist ``(v_x, v_y, omega)`` with ``se2_exp(twist, 1) == P``."""
    theta = P.angle
    if abs(theta) >= np.pi - PI_MARGIN:
        raise DomainError(f"se2_log undefined near |theta| = pi (theta={theta})")
    rho = np.linalg.solve(_se2_V(theta), P.translation)
    return np.array([rho[0], rho[1], theta])


def se2_right_jacobian(xi) -> np.ndarray:
    """Right Jacobian of SE(2): ``exp(xi + d) ~ exp(xi) exp(Jr d)``."""
    r1, r2, th = (float(v) for v in xi)
    if abs(th) < SMALL_ANGLE:
        return np.array(
            [
                [1.0 - th * th / 6.0, th / 2.0, -r2 / 2.0 + r1 * th / 6.0],
                [-th / 2.0, 1.0 - th * th / 6.0, r1 / 2.0 + r2 * th / 6.0],
                [0.0, 0.0, 1.0],
            ]
        )
    s, c = np.sin(th), np.cos(th)
    return np.array(
        [
            [s / th, (1.0 - c) / th, (th * r1 - r2 + r2 * c - r1 * s) / th**2],
            [(c - 1.0) / th, s / th, (r1 + th * r2 - r1 * c - r2 * s) / th**2],
            [0.0, 0.0, 1.0],
        ]
    )


def se2_log_jacobian(P: PlanarPose) -> np.ndarray:
    """Derivative of ``se2_log(P * exp(d))`` with respect to ``d`` at 0."""
    return np.linalg.inv(se2_right_jacobian(se2_log(P)))


def so3_to_zero_yaw(n) -> np.ndarray:
    """Rotation taking the unit vector ``n`` to ``e3`` whose log has zero z."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    axis = np.cross(n, [0.0, 0.0, 1.0])
    s = np.linalg.norm(axis)
    ang = np.arctan2(s, n[2])
    if s < 1e-15:
        if n[2] > 0:
            return np.eye(3)
        return so3_exp([np.pi, 0.0, 0.0])
    return so3_exp(axis / s * ang)
