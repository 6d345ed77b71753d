"""Batch Levenberg-damped Gauss-Newton over a window of frames.

Variables are the IMU state of every frame, the plane, the IMU-to-base
extrinsics, the six RBF parameters and the observed landmarks.  Residuals
are IMU terms between consecutive frames, stereo reprojections, the
inverse (or forward) motion residual per frame pair, the plane residual per
frame and Gaussian priors.  The first frame's position and its yaw about
gravity are held by a stiff anchor because they define the world frame.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .liegroups import Pose3, hat, so3_exp, so3_left_jacobian_inv, so3_log, so3_right_jacobian_inv, so3_to_zero_yaw
from .motionmodel import RbfParams, motion_residual
from .observability import feature_jacobian
from .planeconstraint import E3, PlaneParams, plane_jacobians, plane_residual
from .propagation import GravityModel, VioState, propagate_state, propagate_with_transition

log = logging.getLogger(__name__)

GROUPS = ("imu", "stereo", "motion", "plane", "prior_plane", "prior_extrinsics", "prior_rbf", "anchor")


@dataclass
class EstimatorConfig:
    """Residual selection, weights, priors and initialization.

    Sigmas are standard deviations of the raw residuals.  IMU weights come
    from the noise densities; ``bias_sigma`` is the allowed bias change
    between frames.
    """

    imu: bool = True
    stereo: bool = True
    motion: bool = True
    plane: bool = True
    plane_prior: bool = True
    extrinsic_prior: bool = True
    rbf_prior: bool = True
    anchor: bool = True
    motion_model: str = "inverse"

    gyro_density: float = 1e-3
    accel_density: float = 1e-2
    bias_sigma: float = 1e-4
    sigma_pixel: float = 0.5
    sigma_motion: float = 2e-3
    sigma_plane: float = 1e-3
    sigma_anchor: float = 1e-6

    prior_plane_angle_deg: float = 1.0
    prior_ext_rot_deg: float = 1.0
    prior_ext_trans: float = 0.01
    prior_rbf: tuple = (0.5, 0.1, 0.1)
    accel_init_window: float = 1.0

    init: str = "perturbed"  # or "truth"
    perturb_rot_deg: float = 1.0
    perturb_trans: float = 0.05
    perturb_rbf: float = 0.2
    seed: int = 0

    max_iter: int = 50
    rel_tol: float = 1e-9
    grad_tol: float = 1e-10

    def validate(self) -> None:
        if self.motion_model not in ("inverse", "forward"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if self.init not in ("perturbed", "truth"):
            raise ValueError(f"unknown init {self.init!r}")
        sig = [self.gyro_density, self.accel_density, self.bias_sigma, self.sigma_pixel,
               self.sigma_motion, self.sigma_plane, self.sigma_anchor, self.prior_plane_angle_deg,
               self.prior_ext_rot_deg, self.prior_ext_trans, *self.prior_rbf]
        if min(sig) <= 0:
            raise ValueError("all sigmas must be positive")


@dataclass
class Estimate:
    states: list[VioState]
    plane: PlaneParams
    extrinsics: Pose3
    rbf: np.ndarray
    landmarks: dict[int, np.ndarray]

    def copy(self) -> "Estimate":
        return Estimate(list(self.states), self.plane, self.extrinsics, self.rbf.copy(),
                        {j: f.copy() for j, f in self.landmarks.items()})


@dataclass
class Factor:
    group: str
    blocks: tuple
    sigma: np.ndarray
    evaluate: object  # (Estimate, jac) -> (r, [J per block] or None)


_BLOCK_DIM = {"x": 15, "plane": 3, "ext": 6, "rbf": 6, "f": 3}


def _retract_block(est: Estimate, key, dx) -> None:
    kind = key[0]
    if kind == "x":
        est.states[key[1]] = est.states[key[1]].retract(dx)
    elif kind == "plane":
        est.plane = est.plane.retract(dx)
    elif kind == "ext":
        T = est.extrinsics
        est.extrinsics = Pose3.from_rt(T.R @ so3_exp(dx[:3]), T.t + dx[3:])
    elif kind == "rbf":
        est.rbf = est.rbf + dx
    elif kind == "f":
        est.landmarks[key[1]] = est.landmarks[key[1]] + dx


@dataclass
class Problem:
    times: np.ndarray
    initial: Estimate
    factors: list[Factor]
    config: EstimatorConfig
    prior_means: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = []
        for f in self.factors:
            for b in f.blocks:
                if b not in keys:
                    keys.append(b)
        order = {"x": 0, "plane": 1, "ext": 2, "rbf": 3, "f": 4}
        keys.sort(key=lambda b: (order[b[0]], b[1] if len(b) > 1 else 0))
        self.offsets = {}
        off = 0
        for b in keys:
            self.offsets[b] = off
            off += _BLOCK_DIM[b[0]]
        self.n_vars = off
        self.n_residuals = int(sum(len(f.sigma) for f in self.factors))

    def count(self, group: str) -> int:
        return sum(1 for f in self.factors if f.group == group)

    def linearize(self, est: Estimate):
        """Whitened residual vector and dense Jacobian."""
        r = np.zeros(self.n_residuals)
        J = np.zeros((self.n_residuals, self.n_vars))
        row = 0
        for f in self.factors:
            rf, Js = f.evaluate(est, True)
            m = len(rf)
            r[row : row + m] = rf / f.sigma
            for b, Jb in zip(f.blocks, Js):
                o = self.offsets[b]
                J[row : row + m, o : o + Jb.shape[1]] += Jb / f.sigma[:, None]
            row += m
        return r, J

    def residuals(self, est: Estimate) -> np.ndarray:
        return np.concatenate([f.evaluate(est, False)[0] / f.sigma for f in self.factors])

    def cost(self, est: Estimate) -> float:
        r = self.residuals(est)
        return 0.5 * float(r @ r)

    def group_rms(self, est: Estimate) -> dict[str, float]:
        """Unweighted RMS of each residual group."""
        acc: dict[str, list] = {}
        for f in self.factors:
            acc.setdefault(f.group, []).append(f.evaluate(est, False)[0])
        return {g: float(np.sqrt(np.mean(np.concatenate(v) ** 2))) for g, v in sorted(acc.items())}

    def retract(self, est: Estimate, dx) -> Estimate:
        out = est.copy()
        for b, o in self.offsets.items():
            _retract_block(out, b, dx[o : o + _BLOCK_DIM[b[0]]])
        return out


# ---------------------------------------------------------------- factors


def _imu_factor(k, seg, gravity, cfg):
    dt = seg.t[-1] - seg.t[0]
    s_th = cfg.gyro_density * math.sqrt(dt)
    s_v = cfg.accel_density * math.sqrt(dt)
    s_p = cfg.accel_density * dt**1.5 / math.sqrt(3.0)
    s_b = cfg.bias_sigma
    sigma = np.repeat([s_th, s_b, s_v, s_b, s_p], 3)

    def ev(est, jac=True):
        x0, x1 = est.states[k], est.states[k + 1]
        if not jac:
            r = propagate_state(x0, seg, gravity).local(x1)
            r[3:6] = x1.bg - x0.bg
            r[9:12] = x1.ba - x0.ba
            return r, None
        pred, T = propagate_with_transition(x0, seg, gravity)
        r = pred.local(x1)
        r[3:6] = x1.bg - x0.bg
        r[9:12] = x1.ba - x0.ba
        D1 = np.eye(15)
        D1[0:3, 0:3] = so3_right_jacobian_inv(r[0:3])
        D0 = -np.eye(15)
        D0[0:3, 0:3] = -so3_left_jacobian_inv(r[0:3])
        J0 = D0 @ T.phi
        return r, [J0, D1]

    return Factor("imu", (("x", k), ("x", k + 1)), sigma, ev)


def _stereo_factor(obs, cam, cfg):
    z = np.concatenate([obs.left, obs.right])
    k, j = obs.frame, obs.landmark

    def ev(est, jac=True):
        res = feature_jacobian(est.states[k], est.landmarks[j], cam.baseline)
        if res is None:
            return np.zeros(4), [np.zeros((4, 15)), np.zeros((4, 3))]
        xn, B = res
        pred = cam.focal * xn + np.array([cam.cx, cam.cy, cam.cx, cam.cy])
        Jx = np.zeros((4, 15))
        Jx[:, 0:3] = -cam.focal * B["theta"]
        Jx[:, 12:15] = -cam.focal * B["p"]
        return z - pred, [Jx, -cam.focal * B["f"]]

    return Factor("stereo", (("x", k), ("f", j)), np.full(4, cfg.sigma_pixel), ev)


def _motion_factor(k, dt, window, cfg):
    def ev(est, jac=True):
        x0, x1 = est.states[k], est.states[k + 1]
        r, J = motion_residual(
            Pose3.from_rt(x0.R, x0.p), Pose3.from_rt(x1.R, x1.p), est.extrinsics,
            window, RbfParams.from_array(est.rbf), dt, cfg.motion_model,
        )
        J0 = np.zeros((3, 15))
        J1 = np.zeros((3, 15))
        J0[:, 0:3], J0[:, 12:15] = J.rot1, J.pos1
        J1[:, 0:3], J1[:, 12:15] = J.rot2, J.pos2
        return r, [J0, J1, np.hstack([J.ext_rot, J.ext_pos]), J.rbf]

    return Factor("motion", (("x", k), ("x", k + 1), ("ext",), ("rbf",)), np.full(3, cfg.sigma_motion), ev)


def _plane_factor(k, cfg):
    def ev(est, jac=True):
        x = est.states[k]
        r = plane_residual((x.R, x.p), est.extrinsics, est.plane).as_array()
        H = plane_jacobians((x.R, x.p), est.extrinsics, est.plane)
        Jx = np.zeros((3, 15))
        Jx[0:2, 0:3] = H["H1_q_i"]
        Jx[2:3, 0:3] = H["H2_q_i"]
        Jx[2:3, 12:15] = H["H2_t_i"]
        Jp = np.zeros((3, 3))
        # retract re-gauges the yaw, which rotates r1 about e3
        Jp[0:2, 0:2] = H["H1_q_gw"] - np.outer([-r[1], r[0]], est.plane.retract_yaw_jacobian())
        Jp[2:3, 0:2] = H["H2_q_gw"]
        Jp[2, 2] = 1.0
        Je = np.zeros((3, 6))
        Je[0:2, 0:3] = H["H1_q_bi"]
        Je[2:3, 0:3] = H["H2_q_bi"]
        Je[2:3, 3:6] = H["H2_t_bi"]
        return r, [Jx, Jp, Je]

    return Factor("plane", (("x", k), ("plane",), ("ext",)), np.full(3, cfg.sigma_plane), ev)


def _plane_prior(mean: PlaneParams, cfg):
    A = mean.R_gw

    def ev(est, jac=True):
        R = est.plane.R_gw
        r = (A @ R[2])[:2]
        J = np.zeros((2, 3))
        J[:, :2] = (A @ R.T @ hat(E3))[:2, :2]
        return r, [J]

    sigma = np.full(2, math.radians(cfg.prior_plane_angle_deg))
    return Factor("prior_plane", (("plane",),), sigma, ev)


def _extrinsic_prior(mean: Pose3, cfg):
    def ev(est, jac=True):
        T = est.extrinsics
        rth = so3_log(mean.R.T @ T.R)
        J = np.eye(6)
        J[:3, :3] = so3_right_jacobian_inv(rth)
        return np.concatenate([rth, T.t - mean.t]), [J]

    sigma = np.concatenate([np.full(3, math.radians(cfg.prior_ext_rot_deg)), np.full(3, cfg.prior_ext_trans)])
    return Factor("prior_extrinsics", (("ext",),), sigma, ev)


def _rbf_prior(mean, cfg):
    mean = np.asarray(mean, dtype=float)

    def ev(est, jac=True):
        return est.rbf - mean, [np.eye(6)]

    return Factor("prior_rbf", (("rbf",),), np.tile(np.asarray(cfg.prior_rbf, dtype=float), 2), ev)


def _anchor(ref: VioState, cfg):
    def ev(est, jac=True):
        x = est.states[0]
        phi = so3_log(x.R @ ref.R.T)
        J = np.zeros((4, 15))
        J[0:3, 12:15] = np.eye(3)
        J[3, 0:3] = E3 @ so3_left_jacobian_inv(phi) @ x.R
        return np.concatenate([x.p - ref.p, [phi[2]]]), [J]

    return Factor("anchor", (("x", 0),), np.full(4, cfg.sigma_anchor), ev)


# ---------------------------------------------------------- construction


def _heading(R: np.ndarray) -> float:
    return math.atan2(R[1, 0] - R[0, 1], R[0, 0] + R[1, 1])


def gravity_aligned_rotation(accel_mean, yaw_ref: np.ndarray) -> np.ndarray:
    """``R^w_i`` whose up axis matches the specific force, yaw taken from ``yaw_ref``."""
    R_a = so3_to_zero_yaw(np.asarray(accel_mean, dtype=float))
    psi = _heading(yaw_ref @ R_a.T)
    return so3_exp([0.0, 0.0, psi]) @ R_a


def standstill_end(log_) -> float:
    """End of the initial standstill: one frame before the first nonzero command.

    The effective twist of an interval already sees commands issued at its
    end, so the frame interval before the first nonzero command may move.
    """
    t0 = float(log_.frame_times[0])
    frame_dt = float(log_.frame_times[1] - log_.frame_times[0])
    moving = [c.t for c in log_.commands if c.v != 0.0 or c.omega != 0.0]
    end = (moving[0] if moving else float(log_.frame_times[-1]) + frame_dt) - frame_dt
    return max(end, t0 + frame_dt)


def initial_plane(log_, ext_cad: Pose3, ref: VioState, window: float) -> PlaneParams:
    """Plane from the mean specific force over the standstill (at most ``window`` s)."""
    t0 = float(log_.frame_times[0])
    seg = log_.imu.between(t0, min(t0 + window, standstill_end(log_)))
    R = gravity_aligned_rotation(seg.accel.mean(axis=0), ref.R)
    n = R @ ext_cad.R.T @ E3
    p_b = ref.p - R @ ext_cad.R.T @ ext_cad.t
    return PlaneParams.from_normal(n, -float(n @ p_b))


def _random_unit(rng) -> np.ndarray:
    u = rng.normal(size=3)
    return u / np.linalg.norm(u)


def _initial_estimate(truth, cfg, plane0: PlaneParams) -> Estimate:
    landmarks = {j: truth.landmarks[j].copy() for j in range(len(truth.landmarks))}
    rbf = truth.rbf.as_array()
    if cfg.init == "truth":
        return Estimate(list(truth.states), truth.plane, truth.extrinsics, rbf, landmarks)
    rng = np.random.default_rng(cfg.seed)
    rot = math.radians(cfg.perturb_rot_deg)
    # a shared tilt about the first position (as from a wrong initial gravity
    # direction), then independent per-frame errors; the first frame keeps
    # its position and yaw because the anchor defines them
    a = rng.uniform(0, 2 * np.pi)
    G = so3_exp(rot * np.array([math.cos(a), math.sin(a), 0.0]))
    p0 = truth.states[0].p
    states = []
    for k, x in enumerate(truth.states):
        R, v, p = G @ x.R, G @ x.v, p0 + G @ (x.p - p0)
        if k > 0:
            R = R @ so3_exp(rot * _random_unit(rng))
            p = p + cfg.perturb_trans * _random_unit(rng)
        states.append(VioState(R, np.zeros(3), v + cfg.perturb_trans * _random_unit(rng), np.zeros(3), p))
    landmarks = {j: p0 + G @ (f - p0) for j, f in landmarks.items()}
    T = truth.extrinsics
    ext = Pose3.from_rt(T.R @ so3_exp(rot * _random_unit(rng)), T.t + cfg.perturb_trans * _random_unit(rng))
    rbf = rbf * (1.0 + cfg.perturb_rbf * rng.choice([-1.0, 1.0], size=6))
    landmarks = {j: f + cfg.perturb_trans * _random_unit(rng) for j, f in landmarks.items()}
    return Estimate(states, plane0, ext, rbf, landmarks)


def build_problem(log_, truth, config: EstimatorConfig | None = None) -> Problem:
    """Assemble residuals from a measurement log.

    ``truth`` supplies the initialization (exact or perturbed), the CAD
    extrinsics used as prior mean and the first-frame gauge.
    """
    cfg = config or EstimatorConfig()
    cfg.validate()
    times = np.asarray(log_.frame_times, dtype=float)
    K = len(times)
    if K < 2:
        raise ValueError("need at least two frames")
    gravity = getattr(truth, "gravity", None) or GravityModel()
    ref = truth.states[0]
    ext_cad = truth.extrinsics
    plane0 = initial_plane(log_, ext_cad, ref, cfg.accel_init_window)
    init = _initial_estimate(truth, cfg, plane0)

    factors: list[Factor] = []
    if cfg.imu:
        factors += [_imu_factor(k, log_.imu_between(times[k], times[k + 1]), gravity, cfg) for k in range(K - 1)]
    if cfg.stereo:
        factors += [_stereo_factor(o, log_.camera, cfg) for o in log_.stereo]
    if cfg.motion:
        factors += [
            _motion_factor(k, times[k + 1] - times[k], log_.window(times[k + 1]), cfg) for k in range(K - 1)
        ]
    if cfg.plane:
        factors += [_plane_factor(k, cfg) for k in range(K)]
    means = {}
    if cfg.plane_prior:
        factors.append(_plane_prior(plane0, cfg))
        means["plane"] = plane0
    if cfg.extrinsic_prior:
        factors.append(_extrinsic_prior(ext_cad, cfg))
        means["extrinsics"] = ext_cad
    if cfg.rbf_prior:
        factors.append(_rbf_prior(init.rbf, cfg))
        means["rbf"] = init.rbf.copy()
    if cfg.anchor:
        factors.append(_anchor(ref, cfg))
    if not factors:
        raise ValueError("no residuals selected")
    used = {b for f in factors for b in f.blocks}
    init.landmarks = {j: f for j, f in init.landmarks.items() if ("f", j) in used}
    return Problem(times, init, factors, cfg, means)


# ----------------------------------------------------------------- solve


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    reason: str
    group_rms: dict
    parameters: dict
    stddev: dict
    cost_history: list = field(default_factory=list)  # after each accepted step
    warnings: list = field(default_factory=list)
    estimate: Estimate | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("estimate")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _parameters(est: Estimate) -> dict:
    n = est.plane.normal
    return {
        "plane_normal": [float(x) for x in n],
        "plane_d": float(est.plane.d),
        "extrinsic_rotvec": [float(x) for x in so3_log(est.extrinsics.R)],
        "extrinsic_translation": [float(x) for x in est.extrinsics.t],
        "rbf": dict(zip(("s_lin", "mu_lin", "sigma_lin", "s_ang", "mu_ang", "sigma_ang"), map(float, est.rbf))),
    }


def _marginals(problem: Problem, J: np.ndarray) -> dict:
    try:
        cov = np.linalg.pinv(J.T @ J, rcond=1e-12, hermitian=True)
    except np.linalg.LinAlgError:
        return {}
    out = {}
    for key, name in ((("plane",), "plane"), (("ext",), "extrinsics"), (("rbf",), "rbf")):
        if key in problem.offsets:
            o = problem.offsets[key]
            n = _BLOCK_DIM[key[0]]
            out[name] = [float(math.sqrt(max(v, 0.0))) for v in np.diag(cov)[o : o + n]]
    return out


# below this cost per residual row the relative decrease is round-off noise
_COST_FLOOR = 1e-24


def solve(problem: Problem, max_iter: int | None = None, est: Estimate | None = None) -> SolveReport:
    """Levenberg-damped Gauss-Newton; never raises on numerical failure."""
    cfg = problem.config
    max_iter = cfg.max_iter if max_iter is None else max_iter
    est = (est or problem.initial).copy()
    lam = 1e-6
    r, J = problem.linearize(est)
    cost0 = cost = 0.5 * float(r @ r)
    converged, reason, it = False, "max_iter", 0
    history = [cost0]
    floor = _COST_FLOOR * max(problem.n_residuals, 1)
    for it in range(1, max_iter + 1):
        if cost < floor:
            converged, reason = True, "cost floor"
            it -= 1
            break
        g = J.T @ r
        if not np.all(np.isfinite(g)):
            reason = "non-finite gradient"
            break
        if np.linalg.norm(g) < cfg.grad_tol:
            converged, reason = True, "gradient"
            it -= 1
            break
        # normal equations in column-scaled variables, so the damping acts on
        # every block alike whatever its units and weights
        H = J.T @ J
        d = np.sqrt(np.maximum(np.diag(H), 1e-12))
        Hs = H / np.outer(d, d)
        gs = g / d
        accepted = factored = False
        while lam < 1e12:
            try:
                dx = -cho_solve(cho_factor(Hs + lam * np.eye(len(d))), gs) / d
            except (np.linalg.LinAlgError, ValueError):
                lam *= 10
                continue
            factored = True
            cand = problem.retract(est, dx)
            try:
                c_new = problem.cost(cand)
            except ValueError:  # e.g. a non-positive RBF width
                c_new = math.inf
            log.debug("iter %d lambda %.1e cost %.6e -> %.6e", it, lam, cost, c_new)
            if np.isfinite(c_new) and c_new <= cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            # no step lowers the cost: a minimum up to round-off, unless the
            # damped system could never be factored
            converged = factored
            reason = "no decrease" if factored else "singular normal equations"
            break
        decrease = (cost - c_new) / max(cost, 1e-300)
        est, cost = cand, c_new
        history.append(cost)
        lam = max(lam * 0.5, 1e-12)
        r, J = problem.linearize(est)
        if decrease < cfg.rel_tol:
            converged, reason = True, "relative decrease"
            break
    warnings = []
    if est.rbf[0] <= 0 or est.rbf[3] <= 0:
        warnings.append("RBF scale is not positive")
    if est.rbf[2] <= 0 or est.rbf[5] <= 0:
        warnings.append("RBF width is not positive")
    return SolveReport(
        iterations=it,
        initial_cost=cost0,
        final_cost=cost,
        converged=converged,
        reason=reason,
        group_rms=problem.group_rms(est),
        parameters=_parameters(est),
        stddev=_marginals(problem, J),
        cost_history=history,
        warnings=warnings,
        estimate=est,
    )


def gravity_direction_error(est: VioState, truth: VioState) -> float:
    """Angle (rad) between estimated and true gravity direction in the IMU frame."""
    a, b = est.R.T @ E3, truth.R.T @ E3
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), a @ b))


def plane_angle_error(est: PlaneParams, truth: PlaneParams) -> float:
    a, b = est.normal, truth.normal
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), a @ b))
