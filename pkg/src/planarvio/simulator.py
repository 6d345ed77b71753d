"""Synthetic planar-robot scenarios with IMU, commands and stereo features.

The robot base moves on a tilted ground plane.  Between consecutive frames
it executes the RBF-filtered command window of the later frame as a
constant SE(2) twist, so frame-to-frame base motion matches the inverse
motion model exactly.  IMU samples are the analytic rates of that motion
plus the smallest correction that makes the midpoint integrator of
:mod:`planarvio.propagation` land exactly on the frame states (velocity
is continuous across frames while the twist is not).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .liegroups import PlanarPose, Pose3, se2_exp, so3_exp
from .motionmodel import ControlCommand, RbfParams, effective_control, select_window
from .planeconstraint import PlaneParams
from .propagation import GravityModel, ImuSamples, VioState, propagate_state

Script = Callable[[float], tuple[float, float]]


def _stationary(t):
    return 0.0, 0.0


def _straight(t, v=0.5):
    return v, 0.0


def _circle(t, v=0.5, omega=0.5):
    return v, omega


def _varying(t, v0=0.4, v_amp=0.25, v_period=1.7, w0=0.3, w_amp=0.35, w_period=2.3, w_phase=0.5):
    return (
        v0 + v_amp * math.sin(2 * math.pi * t / v_period),
        w0 + w_amp * math.sin(2 * math.pi * t / w_period + w_phase),
    )


def _stop_and_go(t, v=0.5, omega=0.2, period=2.0):
    moving = (t % period) < 0.5 * period
    return (v, omega) if moving else (0.0, 0.0)


# name -> (factory, description); order is the listing order
PROFILES: dict[str, tuple[Callable[..., tuple[float, float]], str]] = {
    "stationary": (_stationary, "all-zero commands"),
    "straight": (_straight, "constant forward speed, no turning (RBF shape unobservable)"),
    "circle": (_circle, "constant speed and turn rate"),
    "varying": (_varying, "sinusoidal speed and turn rate around a steady turn, non-constant in every window"),
    "stop-and-go": (_stop_and_go, "alternating driving and standing phases"),
}


def scripted_profiles(name: str, **params) -> Script:
    """Command script ``t -> (v, omega)`` for a built-in profile."""
    try:
        fn = PROFILES[name][0]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {list(PROFILES)}") from None
    return lambda t: fn(t, **params)


@dataclass
class NoiseConfig:
    gyro: float = 1e-3  # rad/s/sqrt(Hz)
    accel: float = 1e-2  # m/s^2/sqrt(Hz)
    pixel: float = 0.5
    command: float = 0.0  # perturbation of issued commands
    execution: float = 0.0  # executed twist vs filtered command
    bias_gyro: float = 2e-3  # std of the constant bias draw
    bias_accel: float = 5e-3

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class CameraConfig:
    focal: float = 450.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    baseline: float = 0.11


@dataclass
class Scenario:
    seed: int = 0
    duration: float = 6.0
    imu_rate: float = 200.0
    command_rate: float = 20.0
    frame_rate: float = 10.0
    profile: str = "varying"
    profile_params: dict = field(default_factory=dict)
    still_time: float = 0.5
    window_size: int = 5
    rbf: RbfParams = field(default_factory=lambda: RbfParams(1.1, 0.05, 0.08, 1.1, 0.05, 0.08))
    plane_roll_deg: float = 5.0
    plane_pitch_deg: float = 3.0
    plane_d: float = 0.25
    ext_rpy_deg: tuple = (1.0, -2.0, 3.0)
    ext_translation: tuple = (0.1, 0.0, 0.25)
    n_landmarks: int = 40
    landmark_height: tuple = (1.5, 3.0)
    landmark_margin: float = 2.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not (0 < self.frame_rate <= self.command_rate <= self.imu_rate):
            raise ValueError("rates must satisfy frame <= command <= imu")
        ratio = self.imu_rate / self.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of frame_rate")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")

    @property
    def plane(self) -> PlaneParams:
        return PlaneParams.from_tilt(
            math.radians(self.plane_roll_deg), math.radians(self.plane_pitch_deg), self.plane_d
        )

    @property
    def extrinsics(self) -> Pose3:
        return Pose3.from_rt(rpy_matrix(*np.radians(self.ext_rpy_deg)), self.ext_translation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rbf"] = asdict(self.rbf)
        d["ext_rpy_deg"] = list(self.ext_rpy_deg)
        d["ext_translation"] = list(self.ext_translation)
        d["landmark_height"] = list(self.landmark_height)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "rbf" in d:
            d["rbf"] = RbfParams(**d["rbf"])
        if "noise" in d:
            d["noise"] = NoiseConfig(**d["noise"])
        if "camera" in d:
            d["camera"] = CameraConfig(**d["camera"])
        for k in ("ext_rpy_deg", "ext_translation", "landmark_height"):
            if k in d:
                d[k] = tuple(d[k])
        sc = cls(**d)
        sc.validate()
        return sc

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return so3_exp([0, 0, yaw]) @ so3_exp([0, pitch, 0]) @ so3_exp([roll, 0, 0])


@dataclass
class StereoObservation:
    frame: int
    t: float
    landmark: int
    left: np.ndarray
    right: np.ndarray


@dataclass
class GroundTruth:
    frame_times: np.ndarray
    base_poses: list[PlanarPose]
    base_poses_3d: list[Pose3]
    states: list[VioState]
    twists: np.ndarray  # executed twist of interval k -> k+1
    plane: PlaneParams
    extrinsics: Pose3
    rbf: RbfParams
    landmarks: np.ndarray
    gravity: GravityModel
    imu_clean: ImuSamples

    def imu_pose(self, k: int) -> Pose3:
        return Pose3.from_rt(self.states[k].R, self.states[k].p)


@dataclass
class MeasurementLog:
    imu: ImuSamples
    commands: list[ControlCommand]
    stereo: list[StereoObservation]
    frame_times: np.ndarray
    camera: CameraConfig
    window_size: int

    def window(self, t: float):
        return select_window(self.commands, t, self.window_size)

    def imu_between(self, t0: float, t1: float) -> ImuSamples:
        return self.imu.between(t0, t1)

    def to_csv(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []

        def write(name, header, rows):
            p = out / name
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([_fmt(x) for x in row])
            paths.append(p)

        write(
            "imu.csv",
            ["t", "gyro_x", "gyro_y", "gyro_z", "accel_x", "accel_y", "accel_z"],
            (
                [t, *g, *a]
                for t, g, a in zip(self.imu.t, self.imu.gyro, self.imu.accel)
            ),
        )
        write("commands.csv", ["t", "v", "omega"], ([c.t, c.v, c.omega] for c in self.commands))
        write("frames.csv", ["t", "frame"], ([t, k] for k, t in enumerate(self.frame_times)))
        write(
            "stereo.csv",
            ["t", "frame", "landmark", "u_left", "v_left", "u_right", "v_right"],
            ([o.t, o.frame, o.landmark, *o.left, *o.right] for o in self.stereo),
        )
        return paths


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def command_schedule(scenario: Scenario, rng: np.random.Generator) -> list[ControlCommand]:
    script = scripted_profiles(scenario.profile, **scenario.profile_params)
    n = int(math.floor(scenario.duration * scenario.command_rate + 1e-9)) + 1
    cmds = []
    for m in range(n):
        tau = m / scenario.command_rate
        v, w = script(tau - scenario.still_time) if tau >= scenario.still_time - 1e-12 else (0.0, 0.0)
        if scenario.noise.command > 0:
            v, w = v + rng.normal(0, scenario.noise.command), w + rng.normal(0, scenario.noise.command)
        cmds.append(ControlCommand(tau, float(v), float(w)))
    return cmds


def _lift(P: PlanarPose) -> Pose3:
    return Pose3.from_rt(so3_exp([0.0, 0.0, P.angle]), [P.x, P.y, 0.0])


def _imu_point_velocity(R_wb, xi, t_bi):
    v_b = np.array([xi[0], xi[1], 0.0])
    w_b = np.array([0.0, 0.0, xi[2]])
    return R_wb @ (v_b + np.cross(w_b, t_bi))


def _imu_point_accel(R_wb, xi, t_bi):
    v_b = np.array([xi[0], xi[1], 0.0])
    w_b = np.array([0.0, 0.0, xi[2]])
    return R_wb @ np.cross(w_b, v_b + np.cross(w_b, t_bi))


def _interior_correction(A, b, ratio, width):
    """Min-norm correction per interval that leaves the frame-time samples untouched.

    Rows come in equal blocks per interval; only the interior samples of an
    interval are adjusted, so intervals that already integrate exactly (for
    instance at standstill) keep their analytic samples.
    """
    n_int = (A.shape[1] // width - 1) // ratio
    rows = A.shape[0] // n_int
    dx = np.zeros(A.shape[1])
    for k in range(n_int):
        cols = slice(width * (k * ratio + 1), width * (k * ratio + ratio))
        r = slice(rows * k, rows * (k + 1))
        dx[cols] = np.linalg.lstsq(A[r, cols], b[r], rcond=None)[0]
    return dx


def generate(scenario: Scenario) -> tuple[GroundTruth, MeasurementLog]:
    """Simulate a scenario; the result is a pure function of its fields."""
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    noise = scenario.noise
    gravity = GravityModel()
    g = gravity.g
    plane = scenario.plane
    T_wg = Pose3.from_rt(plane.R_gw.T, -plane.R_gw.T @ np.array([0.0, 0.0, plane.d]))
    T_bi = scenario.extrinsics
    R_bi, t_bi = T_bi.R, T_bi.t

    commands = command_schedule(scenario, rng)
    K = int(math.floor(scenario.duration * scenario.frame_rate + 1e-9)) + 1
    if K < 2:
        raise ValueError("scenario too short for two frames")
    ratio = int(round(scenario.imu_rate / scenario.frame_rate))
    frame_dt = 1.0 / scenario.frame_rate
    frame_times = np.arange(K) / scenario.frame_rate

    twists = np.zeros((K - 1, 3))
    for k in range(K - 1):
        win = select_window(commands, frame_times[k + 1], scenario.window_size)
        twists[k] = effective_control(win, scenario.rbf)
        if noise.execution > 0:
            twists[k, [0, 2]] += rng.normal(0, noise.execution, size=2)

    base = [PlanarPose()]
    for k in range(K - 1):
        base.append(base[-1] * se2_exp(twists[k], frame_dt))
    base3 = [T_wg * _lift(P) for P in base]
    imu_poses = [T * T_bi for T in base3]

    # frame velocities: end of the incoming constant-twist arc, so intervals
    # that start and end at rest need no correction
    vel = [
        _imu_point_velocity(base3[k].R, twists[k - 1] if k > 0 else np.zeros(3), t_bi)
        for k in range(K)
    ]

    M = (K - 1) * ratio
    h = 1.0 / scenario.imu_rate
    sample_t = np.arange(M + 1) / scenario.imu_rate
    # a frame-time sample belongs to the arc that ends there
    interval = np.maximum((np.arange(M + 1) - 1) // ratio, 0)

    # yaw rate about the base z axis, corrected so each interval integrates exactly
    axis = R_bi.T @ np.array([0.0, 0.0, 1.0])
    r_ref = twists[interval, 2]
    A = np.zeros((K - 1, M + 1))
    for k in range(K - 1):
        j0 = k * ratio
        A[k, j0 : j0 + ratio] += 0.5 * h
        A[k, j0 + 1 : j0 + ratio + 1] += 0.5 * h
    b = twists[:, 2] * frame_dt
    rates = r_ref + _interior_correction(A, b - A @ r_ref, ratio, 1)
    gyro_clean = rates[:, None] * axis[None, :]

    R = [imu_poses[0].R]
    R_mid = []
    for j in range(M):
        w = 0.5 * (gyro_clean[j] + gyro_clean[j + 1])
        R_mid.append(R[-1] @ so3_exp(0.5 * h * w))
        R.append(R[-1] @ so3_exp(h * w))

    # specific force: analytic arc value plus min-norm correction
    f_ref = np.zeros((M + 1, 3))
    for j in range(M + 1):
        k = interval[j]
        s = sample_t[j] - frame_times[k]
        R_wb = base3[k].R @ so3_exp([0.0, 0.0, twists[k, 2] * s])
        acc = _imu_point_accel(R_wb, twists[k], t_bi)
        f_ref[j] = R[j].T @ (acc - g)
    nf = 3 * (M + 1)
    A = np.zeros((6 * (K - 1), nf))
    b = np.zeros(6 * (K - 1))
    for k in range(K - 1):
        j0 = k * ratio
        for i in range(ratio):
            j = j0 + i
            c = (ratio - 1 - i) + 0.5
            half = 0.5 * R_mid[j]
            for jj in (j, j + 1):
                A[6 * k : 6 * k + 3, 3 * jj : 3 * jj + 3] += h * half
                A[6 * k + 3 : 6 * k + 6, 3 * jj : 3 * jj + 3] += c * h * h * half
        T = ratio * h
        b[6 * k : 6 * k + 3] = vel[k + 1] - vel[k] - T * g
        b[6 * k + 3 : 6 * k + 6] = (
            imu_poses[k + 1].t - imu_poses[k].t - T * vel[k] - 0.5 * T * T * g
        )
    f_flat = f_ref.ravel()
    f_flat = f_flat + _interior_correction(A, b - A @ f_flat, ratio, 3)
    accel_clean = f_flat.reshape(-1, 3)

    bg = rng.normal(0, noise.bias_gyro, 3) if noise.bias_gyro > 0 else np.zeros(3)
    ba = rng.normal(0, noise.bias_accel, 3) if noise.bias_accel > 0 else np.zeros(3)
    sg = noise.gyro * math.sqrt(scenario.imu_rate)
    sa = noise.accel * math.sqrt(scenario.imu_rate)
    gyro = gyro_clean + bg + (rng.normal(0, sg, gyro_clean.shape) if sg > 0 else 0.0)
    accel = accel_clean + ba + (rng.normal(0, sa, accel_clean.shape) if sa > 0 else 0.0)
    imu = ImuSamples(sample_t, gyro, accel)

    states = [
        VioState(imu_poses[k].R, bg, vel[k], ba, imu_poses[k].t) for k in range(K)
    ]

    landmarks = _landmarks(scenario, rng, base, T_wg)
    stereo = _observe(scenario, rng, states, frame_times, landmarks)

    truth = GroundTruth(
        frame_times=frame_times,
        base_poses=base,
        base_poses_3d=base3,
        states=states,
        twists=twists,
        plane=plane,
        extrinsics=T_bi,
        rbf=scenario.rbf,
        landmarks=landmarks,
        gravity=gravity,
        imu_clean=ImuSamples(sample_t, gyro_clean + bg, accel_clean + ba),
    )
    log = MeasurementLog(imu, commands, stereo, frame_times, scenario.camera, scenario.window_size)
    return truth, log


def _landmarks(scenario, rng, base, T_wg) -> np.ndarray:
    n = scenario.n_landmarks
    if n == 0:
        return np.zeros((0, 3))
    xy = np.array([[P.x, P.y] for P in base])
    lo = xy.min(axis=0) - scenario.landmark_margin
    hi = xy.max(axis=0) + scenario.landmark_margin
    pts = np.column_stack(
        [
            rng.uniform(lo[0], hi[0], n),
            rng.uniform(lo[1], hi[1], n),
            rng.uniform(*scenario.landmark_height, n),
        ]
    )
    return np.array([T_wg.transform(p) for p in pts])


def project(cam: CameraConfig, p_c) -> np.ndarray:
    return np.array([cam.focal * p_c[0] / p_c[2] + cam.cx, cam.focal * p_c[1] / p_c[2] + cam.cy])


def _visible(cam: CameraConfig, p_c) -> bool:
    if p_c[2] <= 0.1:
        return False
    u, v = project(cam, p_c)
    return 0 <= u <= cam.width and 0 <= v <= cam.height


def _observe(scenario, rng, states, frame_times, landmarks) -> list[StereoObservation]:
    cam = scenario.camera
    base = np.array([cam.baseline, 0.0, 0.0])
    sp = scenario.noise.pixel
    obs = []
    for k, x in enumerate(states):
        for j, f in enumerate(landmarks):
            pl = x.R.T @ (f - x.p)
            pr = pl - base
            if not (_visible(cam, pl) and _visible(cam, pr)):
                continue
            ul, ur = project(cam, pl), project(cam, pr)
            if sp > 0:
                ul = ul + rng.normal(0, sp, 2)
                ur = ur + rng.normal(0, sp, 2)
            obs.append(StereoObservation(k, float(frame_times[k]), j, ul, ur))
    return obs


def check_integration(truth: GroundTruth) -> float:
    """Max frame position error of re-integrating the clean IMU stream."""
    err = 0.0
    x = truth.states[0]
    for k in range(1, len(truth.states)):
        x = propagate_state(x, truth.imu_clean.between(truth.frame_times[k - 1], truth.frame_times[k]), truth.gravity)
        err = max(err, float(np.linalg.norm(x.p - truth.states[k].p)))
    return err
