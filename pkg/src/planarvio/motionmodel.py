"""Velocity-control kinematic motion model.

A window of issued ``(v, omega)`` commands is smoothed with an RBF kernel
over command age into an effective planar twist ``(v, 0, omega)``.  The
relative base motion between two frames, obtained from the IMU poses and
the base-to-IMU extrinsics, is compared with that twist either in the Lie
algebra (inverse model) or on the group (forward model).

Extrinsics are the IMU-to-base transform ``T^b_i`` (``x_b = R_bi x_i + t_bi``).
Residuals are always ``measurement - prediction``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .liegroups import (
    PlanarPose,
    Pose3,
    hat,
    se2_exp,
    se2_log,
    se2_log_jacobian,
    se2_right_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    so3_right_jacobian_inv,
)

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 5
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class ControlCommand:
    t: float
    v: float
    omega: float


@dataclass(frozen=True)
class RbfParams:
    """Scale, center (s) and width (s) of the kernel, per channel."""

    s_lin: float = 1.0
    mu_lin: float = 0.0
    sigma_lin: float = 0.1
    s_ang: float = 1.0
    mu_ang: float = 0.0
    sigma_ang: float = 0.1

    def __post_init__(self):
        if self.sigma_lin <= 0 or self.sigma_ang <= 0:
            raise ValueError("RBF widths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.s_lin, self.mu_lin, self.sigma_lin, self.s_ang, self.mu_ang, self.sigma_ang]
        )

    @classmethod
    def from_array(cls, a) -> "RbfParams":
        return cls(*(float(x) for x in a))

    def channel(self, k: int) -> tuple[float, float, float]:
        a = self.as_array()
        return tuple(a[3 * k : 3 * k + 3])


@dataclass(frozen=True)
class CommandWindow:
    t: float
    commands: tuple[ControlCommand, ...]

    def __post_init__(self):
        if not self.commands:
            raise ValueError("command window is empty")
        taus = [c.t for c in self.commands]
        if any(tau > self.t + _TIME_EPS for tau in taus):
            raise ValueError("window contains commands after the query time")
        if any(b < a for a, b in zip(taus, taus[1:])):
            raise ValueError("window timestamps must be non-decreasing")

    @property
    def ages(self) -> np.ndarray:
        return np.array([self.t - c.t for c in self.commands])

    @property
    def v(self) -> np.ndarray:
        return np.array([c.v for c in self.commands])

    @property
    def omega(self) -> np.ndarray:
        return np.array([c.omega for c in self.commands])


def select_window(commands: Sequence[ControlCommand], t: float, n: int = DEFAULT_WINDOW) -> CommandWindow:
    """The ``n`` most recent commands with timestamp ``<= t`` (inclusive)."""
    eligible = [c for c in commands if c.t <= t + _TIME_EPS]
    if not eligible:
        raise ValueError(f"no command at or before t={t}")
    if len(eligible) < n:
        log.warning("only %d of %d commands available before t=%.3f", len(eligible), n, t)
    return CommandWindow(t, tuple(eligible[-n:]))


def _kernel(ages, mu, sigma):
    # normalised by the largest weight; the ratio in the average is unchanged
    e = -((ages - mu) ** 2) / (2.0 * sigma**2)
    return np.exp(e - e.max())


def _channel_average(ages, values, s, mu, sigma):
    w = _kernel(ages, mu, sigma)
    return s * (w @ values) / w.sum()


def _channel_jacobian(ages, values, s, mu, sigma):
    w = _kernel(ages, mu, sigma)
    W = w.sum()
    vbar = s * (w @ values) / W
    dmu = (ages - mu) / sigma**2
    dsig = (ages - mu) ** 2 / sigma**3
    # d vbar / d theta = s (sum w' c - cbar sum w') / sum w, with w' = w * d.
    # Centring on one of the values makes constant windows exactly zero.
    c = values - values[0]
    cbar = (w @ c) / W
    d_mu = s * ((w * dmu) @ c - cbar * (w @ dmu)) / W
    d_sig = s * ((w * dsig) @ c - cbar * (w @ dsig)) / W
    return np.array([vbar / s, d_mu, d_sig])


def effective_control(window: CommandWindow, params: RbfParams) -> np.ndarray:
    """Effective twist ``(v_bar, 0, omega_bar)`` of the window."""
    ages = window.ages
    v = _channel_average(ages, window.v, params.s_lin, params.mu_lin, params.sigma_lin)
    w = _channel_average(ages, window.omega, params.s_ang, params.mu_ang, params.sigma_ang)
    return np.array([v, 0.0, w])


def effective_control_jacobian(window: CommandWindow, params: RbfParams) -> np.ndarray:
    """2x3 matrix: row 0 is ``d v_bar / d(s, mu, sigma)_lin``, row 1 the angular one."""
    ages = window.ages
    return np.vstack(
        [
            _channel_jacobian(ages, window.v, params.s_lin, params.mu_lin, params.sigma_lin),
            _channel_jacobian(ages, window.omega, params.s_ang, params.mu_ang, params.sigma_ang),
        ]
    )


def twist_rbf_jacobian(window: CommandWindow, params: RbfParams) -> np.ndarray:
    """3x6 derivative of the effective twist w.r.t. the stacked RBF parameters."""
    J = effective_control_jacobian(window, params)
    out = np.zeros((3, 6))
    out[0, :3] = J[0]
    out[2, 3:] = J[1]
    return out


def relative_base_motion(T_wi_1: Pose3, T_wi_2: Pose3, T_bi: Pose3) -> Pose3:
    """Base motion from the first to the second frame, ``T^{b1}_{b2}``."""
    return T_bi * T_wi_1.inverse() * T_wi_2 * T_bi.inverse()


def planarize(T_rel: Pose3) -> PlanarPose:
    """Heading from the z part of the rotation log, translation from x/y."""
    phi = so3_log(T_rel.rotation)
    return PlanarPose(phi[2], T_rel.translation[0], T_rel.translation[1])


def residual_inverse(P_rel: PlanarPose, xi, dt: float) -> np.ndarray:
    """``se2_log(P_rel) - dt * xi``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return se2_log(P_rel) - dt * np.asarray(xi, dtype=float)


def residual_forward(P_rel: PlanarPose, xi, dt: float) -> np.ndarray:
    """Translation difference and heading difference on the group."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    pred = se2_exp(xi, dt)
    return np.array(
        [P_rel.x - pred.x, P_rel.y - pred.y, P_rel.angle - dt * float(xi[2])]
    )


def _coords_to_right(P: PlanarPose) -> np.ndarray:
    # d(right perturbation) / d(x, y, angle)
    c, s = np.cos(P.angle), np.sin(P.angle)
    M = np.eye(3)
    M[:2, :2] = np.array([[c, s], [-s, c]])
    return M


def inverse_pose_jacobian(P_rel: PlanarPose) -> np.ndarray:
    """d r_inverse / d(x, y, angle) of the relative pose."""
    return se2_log_jacobian(P_rel) @ _coords_to_right(P_rel)


def forward_twist_jacobian(xi, dt: float) -> np.ndarray:
    """d r_forward / d xi (3x3)."""
    x = dt * np.asarray(xi, dtype=float)
    P = se2_exp(x, 1.0)
    D = np.linalg.inv(_coords_to_right(P))  # d coords / d right perturbation
    return -dt * D @ se2_right_jacobian(x)


@dataclass
class MotionJacobians:
    """Blocks of a motion residual.

    ``pose``: w.r.t. right perturbation of ``P_rel``; ``rbf``: 3x6 over
    ``(s, mu, sigma)_lin, (s, mu, sigma)_ang``.  The remaining blocks are
    w.r.t. the SE(3) IMU poses (rotation right-perturbed, translation
    additive in the world frame) and the extrinsics (same convention).
    """

    pose: np.ndarray
    rbf: np.ndarray
    rot1: np.ndarray | None = None
    pos1: np.ndarray | None = None
    rot2: np.ndarray | None = None
    pos2: np.ndarray | None = None
    ext_rot: np.ndarray | None = None
    ext_pos: np.ndarray | None = None


def residual_jacobians(
    P_rel: PlanarPose, window: CommandWindow, params: RbfParams, dt: float
) -> MotionJacobians:
    """Pose and RBF blocks of the inverse residual."""
    return MotionJacobians(
        pose=se2_log_jacobian(P_rel),
        rbf=-dt * twist_rbf_jacobian(window, params),
    )


def _coords_jacobians(T_wi_1: Pose3, T_wi_2: Pose3, T_bi: Pose3):
    """d(x, y, angle) of the planarized base motion w.r.t. poses and extrinsics."""
    R1, R2, Rbi, tbi = T_wi_1.R, T_wi_2.R, T_bi.R, T_bi.t
    Rb1 = R1 @ Rbi.T
    Rrel = Rbi @ R1.T @ R2 @ Rbi.T
    phi = so3_log(Rrel)
    Jr_inv = so3_right_jacobian_inv(phi)
    Jl_inv = so3_left_jacobian_inv(phi)
    d = Rb1.T @ (T_wi_2.t - T_wi_1.t)
    rt = Rrel @ tbi

    ang_rot1 = -Jl_inv @ Rbi
    ang_rot2 = Jr_inv @ Rbi
    ang_ext = (Jl_inv - Jr_inv) @ Rbi
    tr_rot1 = (hat(d) - hat(rt)) @ Rbi
    tr_rot2 = Rrel @ hat(tbi) @ Rbi
    tr_ext = (-hat(d) + hat(rt) - Rrel @ hat(tbi)) @ Rbi

    def stack(tr, ang):
        return np.vstack([tr[:2], ang[2:3]])

    z = np.zeros((3, 3))
    return {
        "rot1": stack(tr_rot1, ang_rot1),
        "pos1": stack(-Rb1.T, z),
        "rot2": stack(tr_rot2, ang_rot2),
        "pos2": stack(Rb1.T, z),
        "ext_rot": stack(tr_ext, ang_ext),
        "ext_pos": stack(np.eye(3) - Rrel, z),
    }


def motion_residual(
    T_wi_1: Pose3,
    T_wi_2: Pose3,
    T_bi: Pose3,
    window: CommandWindow,
    params: RbfParams,
    dt: float,
    model: str = "inverse",
) -> tuple[np.ndarray, MotionJacobians]:
    """Motion residual between two IMU poses with all Jacobian blocks."""
    P = planarize(relative_base_motion(T_wi_1, T_wi_2, T_bi))
    xi = effective_control(window, params)
    dxi = twist_rbf_jacobian(window, params)
    if model == "inverse":
        r = residual_inverse(P, xi, dt)
        D = inverse_pose_jacobian(P)
        pose = se2_log_jacobian(P)
        rbf = -dt * dxi
    elif model == "forward":
        r = residual_forward(P, xi, dt)
        D = np.eye(3)
        pose = np.linalg.inv(_coords_to_right(P))
        rbf = forward_twist_jacobian(xi, dt) @ dxi
    else:
        raise ValueError(f"unknown motion model {model!r}")
    C = _coords_jacobians(T_wi_1, T_wi_2, T_bi)
    return r, MotionJacobians(pose=pose, rbf=rbf, **{k: D @ v for k, v in C.items()})
