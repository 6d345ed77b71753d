"""IMU strapdown propagation and its error-state transition matrix.

Error state ordering is ``(dtheta, db_g, dv, db_a, dp)``, 15 entries, with
``dtheta`` a right perturbation of ``R^w_i``.  Block ``(i, j)`` (1-based) of
a transition matrix is ``phi[3(i-1):3i, 3(j-1):3j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .liegroups import hat, so3_exp, so3_log, so3_right_jacobian

STATE_DIM = 15
BLOCKS = ("theta", "bg", "v", "ba", "p")
ROT, BG, VEL, BA, POS = (slice(3 * i, 3 * i + 3) for i in range(5))
GRAVITY = 9.81


@dataclass(frozen=True)
class GravityModel:
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if abs(np.linalg.norm(g) - GRAVITY) > 1e-6:
            raise ValueError(f"|g| must be {GRAVITY}, got {np.linalg.norm(g)}")
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class VioState:
    """IMU state: ``R`` maps IMU to world coordinates (``R^w_i``)."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("R", "bg", "v", "ba", "p"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))

    def retract(self, dx) -> "VioState":
        dx = np.asarray(dx, dtype=float)
        return VioState(
            self.R @ so3_exp(dx[ROT]),
            self.bg + dx[BG],
            self.v + dx[VEL],
            self.ba + dx[BA],
            self.p + dx[POS],
        )

    def local(self, other: "VioState") -> np.ndarray:
        """``dx`` with ``self.retract(dx) == other``."""
        return np.concatenate(
            [
                so3_log(self.R.T @ other.R),
                other.bg - self.bg,
                other.v - self.v,
                other.ba - self.ba,
                other.p - self.p,
            ]
        )


@dataclass(frozen=True)
class ImuSamples:
    """Time-stamped gyro (rad/s) and specific-force (m/s^2) samples."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(-1, 3))
        if not (len(t) == len(self.gyro) == len(self.accel)):
            raise ValueError("sample arrays have different lengths")
        if np.any(np.diff(t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def between(self, t0: float, t1: float, eps: float = 1e-9) -> "ImuSamples":
        """Samples with ``t0 <= t <= t1``, both ends included."""
        m = (self.t >= t0 - eps) & (self.t <= t1 + eps)
        return ImuSamples(self.t[m], self.gyro[m], self.accel[m])


@dataclass
class TransitionMatrix:
    phi: np.ndarray
    t0: float
    t1: float

    def block(self, i: int, j: int) -> np.ndarray:
        return self.phi[3 * (i - 1) : 3 * i, 3 * (j - 1) : 3 * j]

    def __matmul__(self, other: "TransitionMatrix") -> "TransitionMatrix":
        return TransitionMatrix(self.phi @ other.phi, other.t0, self.t1)


def _steps(samples: ImuSamples):
    if len(samples) == 0:
        raise ValueError("empty IMU stream")
    for j in range(len(samples) - 1):
        h = samples.t[j + 1] - samples.t[j]
        w = 0.5 * (samples.gyro[j] + samples.gyro[j + 1])
        f = 0.5 * (samples.accel[j] + samples.accel[j + 1])
        yield h, w, f


def _step(x: VioState, h, w_m, f_m, g):
    w = w_m - x.bg
    a = f_m - x.ba
    R_mid = x.R @ so3_exp(0.5 * h * w)
    acc = R_mid @ a + g
    return VioState(
        x.R @ so3_exp(h * w),
        x.bg,
        x.v + h * acc,
        x.ba,
        x.p + h * x.v + 0.5 * h * h * acc,
    )


def _step_jacobian(x: VioState, h, w_m, f_m):
    w = w_m - x.bg
    a = f_m - x.ba
    E_half = so3_exp(0.5 * h * w)
    R_mid = x.R @ E_half
    F = np.eye(STATE_DIM)
    F[ROT, ROT] = so3_exp(h * w).T
    F[ROT, BG] = -h * so3_right_jacobian(h * w)
    # perturbation of the mid-step rotation
    dm_dth = E_half.T
    dm_dbg = -0.5 * h * so3_right_jacobian(0.5 * h * w)
    Ra = R_mid @ hat(a)
    dacc_dth = -Ra @ dm_dth
    dacc_dbg = -Ra @ dm_dbg
    F[VEL, ROT] = h * dacc_dth
    F[VEL, BG] = h * dacc_dbg
    F[VEL, BA] = -h * R_mid
    F[POS, ROT] = 0.5 * h * h * dacc_dth
    F[POS, BG] = 0.5 * h * h * dacc_dbg
    F[POS, VEL] = h * np.eye(3)
    F[POS, BA] = -0.5 * h * h * R_mid
    return F


def propagate_state(x: VioState, samples: ImuSamples, gravity: GravityModel | None = None) -> VioState:
    """Integrate from the first to the last sample time.

    Each step uses the average of its two end samples and the rotation at
    the middle of the step.  Biases are held constant.
    """
    g = (gravity or GravityModel()).g
    for h, w, f in _steps(samples):
        x = _step(x, h, w, f, g)
    return x


def propagate_with_transition(
    x: VioState, samples: ImuSamples, gravity: GravityModel | None = None
) -> tuple[VioState, TransitionMatrix]:
    g = (gravity or GravityModel()).g
    phi = np.eye(STATE_DIM)
    for h, w, f in _steps(samples):
        phi = _step_jacobian(x, h, w, f) @ phi
        x = _step(x, h, w, f, g)
    return x, TransitionMatrix(phi, float(samples.t[0]), float(samples.t[-1]))


def transition_matrix(x: VioState, samples: ImuSamples, gravity: GravityModel | None = None) -> TransitionMatrix:
    return propagate_with_transition(x, samples, gravity)[1]


@dataclass
class AugmentedTransition:
    phi: np.ndarray
    n_vio: int = STATE_DIM

    @property
    def parameter_block(self) -> np.ndarray:
        return self.phi[self.n_vio :, self.n_vio :]


def augment(phi: TransitionMatrix | np.ndarray, n_params: int = 15) -> AugmentedTransition:
    """Block-diagonal ``[[phi, 0], [0, I]]`` over ``n_params`` parameter coordinates."""
    P = phi.phi if isinstance(phi, TransitionMatrix) else np.asarray(phi)
    out = np.eye(STATE_DIM + n_params)
    out[:STATE_DIM, :STATE_DIM] = P
    return AugmentedTransition(out)


def with_biases(x: VioState, bg=None, ba=None) -> VioState:
    return replace(
        x,
        bg=x.bg if bg is None else np.asarray(bg, dtype=float),
        ba=x.ba if ba is None else np.asarray(ba, dtype=float),
    )
