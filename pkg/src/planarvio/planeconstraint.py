"""Stochastic ground-plane constraint.

The plane is stored as the world-to-plane rotation ``R_gw`` in its zero-yaw
gauge plus the offset ``d`` so that a world point ``x`` lies on the plane
when ``e3 . (R_gw x) + d == 0``.  Plane perturbations act on the left,
``exp(hat([a, b, 0])) @ R_gw``; only the two tilt axes are free.

Orientation perturbations of the IMU are right-multiplicative on
``R^w_i``.  A derivation that perturbs ``R^i_w`` instead
flips the sign of the two ``d r / d q^i_w`` blocks; everything else
matches term by term (checked against finite differences in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroups import Pose3, hat, so3_exp, so3_left_jacobian_inv, so3_log, so3_to_zero_yaw

E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class PlaneParams:
    R_gw: np.ndarray
    d: float

    def __post_init__(self):
        object.__setattr__(self, "R_gw", np.asarray(self.R_gw, dtype=float))

    @classmethod
    def from_normal(cls, n_w, d: float) -> "PlaneParams":
        """Plane with world-frame unit normal ``n_w``."""
        return cls(so3_to_zero_yaw(n_w), d)

    @classmethod
    def from_tilt(cls, roll: float, pitch: float, d: float) -> "PlaneParams":
        return cls.from_normal(so3_exp([roll, pitch, 0.0]).T @ E3, d)

    @property
    def normal(self) -> np.ndarray:
        return self.R_gw[2].copy()

    def retract(self, delta) -> "PlaneParams":
        """Apply a ``(tilt_x, tilt_y, d)`` increment and restore the gauge."""
        R = so3_exp([delta[0], delta[1], 0.0]) @ self.R_gw
        return PlaneParams(so3_to_zero_yaw(R[2]), self.d + float(delta[2]))

    def retract_yaw_jacobian(self) -> np.ndarray:
        """d(yaw removed by :meth:`retract`) / d(tilt_x, tilt_y), shape (2,).

        The re-gauged rotation is ``Rz(-psi) exp([a, b, 0]) R_gw``; to first
        order ``psi`` cancels the z part of the log increment.
        """
        Jl = so3_left_jacobian_inv(so3_log(self.R_gw))
        return Jl[2, :2] / Jl[2, 2]

    def yaw(self) -> float:
        return float(so3_log(self.R_gw)[2])


@dataclass(frozen=True)
class PlaneResidual:
    r1: np.ndarray
    r2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r1[0], self.r1[1], self.r2])


def plane_residual(T_wi: Pose3 | tuple, T_bi: Pose3, plane: PlaneParams) -> PlaneResidual:
    """Alignment of the base z-axis with the normal, and base height."""
    R_wi, t_wi = _rt(T_wi)
    R_bi, t_bi = _rt(T_bi)
    u = plane.R_gw @ R_wi @ R_bi.T @ E3
    p_b = t_wi - R_wi @ R_bi.T @ t_bi
    return PlaneResidual(u[:2].copy(), plane.d + float(E3 @ plane.R_gw @ p_b))


def _rt(T):
    if isinstance(T, Pose3):
        return T.R, T.t
    return np.asarray(T[0], dtype=float), np.asarray(T[1], dtype=float)


def plane_jacobians(T_wi, T_bi, plane: PlaneParams) -> dict[str, np.ndarray]:
    """Jacobian blocks of the plane residual.

    Keys follow the row/variable naming ``H1_q_i``, ``H1_q_gw``, ``H2_q_i``,
    ``H2_q_gw``, ``H2_t_i``, ``H2_d``; the extrinsic blocks
    ``H1_q_bi``, ``H2_q_bi`` and ``H2_t_bi`` are included for estimation.
    """
    R_wi, t_wi = _rt(T_wi)
    R_bi, t_bi = _rt(T_bi)
    R_gw = plane.R_gw
    a = R_bi.T @ E3
    c = R_bi.T @ t_bi
    u = R_gw @ R_wi @ a
    p_b = t_wi - R_wi @ c
    A = R_gw @ R_wi
    return {
        "H1_q_i": -(A @ hat(a))[:2],
        "H1_q_gw": -hat(u)[:2, :2],
        "H1_q_bi": (A @ hat(a))[:2],
        "H2_q_i": (E3 @ A @ hat(c))[None, :],
        "H2_q_gw": -(E3 @ hat(R_gw @ p_b))[None, :2],
        "H2_t_i": (E3 @ R_gw)[None, :],
        "H2_d": np.ones((1, 1)),
        "H2_q_bi": -(E3 @ A @ hat(c))[None, :],
        "H2_t_bi": -(E3 @ A @ R_bi.T)[None, :],
    }
