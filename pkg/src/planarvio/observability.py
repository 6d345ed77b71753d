"""Observability matrix assembly and nullspace analysis.

Rows are measurement Jacobians at step ``k`` times the augmented transition
from the first analysed frame, ``H_k @ augment(Phi_{k,1})``.  Columns follow
a :class:`Layout` holding the 15 IMU error states of the first frame and
whichever parameter blocks the selected measurements touch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import subspace_angles

from .liegroups import Pose3, hat
from .motionmodel import CommandWindow, RbfParams, motion_residual
from .planeconstraint import PlaneParams, plane_jacobians
from .propagation import GravityModel, ImuSamples, VioState, propagate_with_transition

log = logging.getLogger(__name__)

MEASUREMENTS = ("plane", "motion", "motion_forward", "features")
PRIORS = ("plane_angle", "position", "extrinsics", "rbf")

_VIO_BLOCKS = (("theta", 3), ("bg", 3), ("v", 3), ("ba", 3), ("p", 3))


@dataclass
class Layout:
    """Named column blocks of the augmented error state."""

    blocks: list[tuple[str, int]]

    def __post_init__(self):
        self.offsets = {}
        off = 0
        for name, size in self.blocks:
            self.offsets[name] = slice(off, off + size)
            off += size
        self.dim = off

    def __getitem__(self, name: str) -> slice:
        return self.offsets[name]

    def __contains__(self, name: str) -> bool:
        return name in self.offsets

    def labels(self) -> list[str]:
        return [f"{name}[{i}]" for name, size in self.blocks for i in range(size)]

    @classmethod
    def full(cls, n_landmarks: int = 0) -> "Layout":
        """All parameter blocks: ``15 + 3 + 6 + 6 + 3 * n_landmarks`` columns."""
        blocks = list(_VIO_BLOCKS) + [
            ("plane_q", 2), ("plane_d", 1), ("ext_q", 3), ("ext_t", 3), ("rbf_lin", 3), ("rbf_ang", 3),
        ]
        if n_landmarks:
            blocks.append(("landmarks", 3 * n_landmarks))
        return cls(blocks)

    @classmethod
    def for_selection(cls, selection, n_landmarks: int = 0, priors=()) -> "Layout":
        """Only the parameter blocks touched by the selected rows and priors."""
        sel = set(selection)
        blocks = list(_VIO_BLOCKS)
        if "plane" in sel or "plane_angle" in priors:
            blocks += [("plane_q", 2), ("plane_d", 1)]
        if sel & {"plane", "motion", "motion_forward"} or "extrinsics" in priors:
            blocks += [("ext_q", 3), ("ext_t", 3)]
        if sel & {"motion", "motion_forward"} or "rbf" in priors:
            blocks += [("rbf_lin", 3), ("rbf_ang", 3)]
        if "features" in sel:
            blocks += [("landmarks", 3 * n_landmarks)]
        return cls(blocks)

    def landmark(self, j: int) -> slice:
        s = self.offsets["landmarks"]
        return slice(s.start + 3 * j, s.start + 3 * j + 3)


@dataclass
class AugmentedState:
    """Noise-free linearization points for an observability analysis."""

    times: np.ndarray
    states: list[VioState]
    imu: ImuSamples
    plane: PlaneParams
    extrinsics: Pose3
    rbf: RbfParams
    windows: list[CommandWindow]
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    baseline: float = 0.11
    gravity: GravityModel = field(default_factory=GravityModel)

    @classmethod
    def from_simulation(cls, truth, log_, first: int = 0, count: int | None = None) -> "AugmentedState":
        last = len(truth.frame_times) if count is None else first + count
        idx = range(first, last)
        if len(idx) < 2 or last > len(truth.frame_times):
            raise ValueError("need at least two frames inside the simulated range")
        times = truth.frame_times[first:last]
        return cls(
            times=times,
            states=[truth.states[k] for k in idx],
            imu=truth.imu_clean.between(times[0], times[-1]),
            plane=truth.plane,
            extrinsics=truth.extrinsics,
            rbf=truth.rbf,
            windows=[log_.window(t) for t in times],
            landmarks=truth.landmarks,
            baseline=log_.camera.baseline,
            gravity=truth.gravity,
        )

    @property
    def error_dim(self) -> int:
        return 15 + 3 + 6 + 6 + 3 * len(self.landmarks)


@dataclass
class ObservabilityMatrix:
    matrix: np.ndarray
    rows: list[tuple[str, int, int]]  # (measurement, step, component)
    layout: Layout

    def select(self, kinds) -> "ObservabilityMatrix":
        keep = [i for i, r in enumerate(self.rows) if r[0] in kinds]
        return ObservabilityMatrix(self.matrix[keep], [self.rows[i] for i in keep], self.layout)

    def row_normalized(self) -> np.ndarray:
        n = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        return self.matrix / np.where(n > 0, n, 1.0)


@dataclass
class NullspaceBasis:
    basis: np.ndarray  # columns
    layout: Layout
    provenance: str
    singular_values: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def block(self, name: str) -> np.ndarray:
        return self.basis[self.layout[name]]


def feature_jacobian(state: VioState, landmark, baseline: float = 0.11):
    """Normalized stereo coordinates and their Jacobians.

    Returns ``(z, blocks)`` with ``z = (x_l, y_l, x_r, y_r)`` and ``blocks``
    holding 4x3 matrices for ``theta``, ``p`` and ``f``, or ``None`` when
    the landmark is not in front of both cameras.  The left camera is the
    IMU frame (optical axis +z); the right one is shifted by ``baseline``
    along +x.
    """
    R, p = state.R, state.p
    pc = R.T @ (np.asarray(landmark, dtype=float) - p)
    z, J_th, J_p, J_f = [], [], [], []
    for off in (0.0, baseline):
        q = pc - np.array([off, 0.0, 0.0])
        if q[2] <= 0:
            log.warning("landmark behind camera (depth %.3g), row skipped", q[2])
            return None
        z += [q[0] / q[2], q[1] / q[2]]
        P = np.array([[1 / q[2], 0, -q[0] / q[2] ** 2], [0, 1 / q[2], -q[1] / q[2] ** 2]])
        J_th.append(P @ hat(pc))
        J_p.append(-P @ R.T)
        J_f.append(P @ R.T)
    return np.array(z), {"theta": np.vstack(J_th), "p": np.vstack(J_p), "f": np.vstack(J_f)}


def transitions(scn: AugmentedState) -> tuple[list[np.ndarray], list[VioState]]:
    """``Phi_{k,1}`` for every frame, and the propagated states."""
    phis = [np.eye(15)]
    states = [scn.states[0]]
    for k in range(1, len(scn.times)):
        seg = scn.imu.between(scn.times[k - 1], scn.times[k])
        x, T = propagate_with_transition(states[-1], seg, scn.gravity)
        phis.append(T.phi @ phis[-1])
        states.append(x)
    return phis, states


def _pose(x: VioState) -> Pose3:
    return Pose3.from_rt(x.R, x.p)


def build_observability(
    scn: AugmentedState, selection, priors=(), layout: Layout | str = "selected"
) -> ObservabilityMatrix:
    """Stack ``H_k Phi_bar_{k,1}`` over all steps for the selected measurements.

    ``selection`` is a subset of ``plane``, ``motion`` (inverse model),
    ``motion_forward`` and ``features``.  ``priors`` adds identity rows at
    the first step on ``plane_angle``, ``position``, ``extrinsics`` or ``rbf``.
    ``layout`` is ``"selected"`` (drop parameter blocks no row touches, so
    they do not inflate the nullspace), ``"full"`` or an explicit
    :class:`Layout`.
    """
    selection = tuple(selection)
    if not selection and not priors:
        raise ValueError("empty measurement selection")
    bad = set(selection) - set(MEASUREMENTS)
    if bad or set(priors) - set(PRIORS):
        raise ValueError(f"unknown measurements/priors: {sorted(bad | (set(priors) - set(PRIORS)))}")
    if len(scn.times) < 2:
        raise ValueError("need K >= 2 steps")
    L = len(scn.landmarks)
    if layout == "selected":
        lay = Layout.for_selection(selection, L, priors)
    elif layout == "full":
        lay = Layout.full(L)
    else:
        lay = layout
    phis, _ = transitions(scn)
    states = scn.states
    vio = slice(0, 15)
    rows, labels = [], []

    def vio_rows(H_theta, H_p, k):
        Hv = np.zeros((H_theta.shape[0], 15))
        Hv[:, 0:3] = H_theta
        Hv[:, 12:15] = H_p
        return Hv @ phis[k]

    for k, x in enumerate(states):
        if "plane" in selection:
            H = plane_jacobians((x.R, x.p), scn.extrinsics, scn.plane)
            row = np.zeros((3, lay.dim))
            row[:, vio] = vio_rows(
                np.vstack([H["H1_q_i"], H["H2_q_i"]]),
                np.vstack([np.zeros((2, 3)), H["H2_t_i"]]),
                k,
            )
            row[:, lay["plane_q"]] = np.vstack([H["H1_q_gw"], H["H2_q_gw"]])
            row[2, lay["plane_d"]] = 1.0
            row[:, lay["ext_q"]] = np.vstack([H["H1_q_bi"], H["H2_q_bi"]])
            row[2:, lay["ext_t"]] = H["H2_t_bi"]
            rows.append(row)
            labels += [("plane", k, c) for c in range(3)]
        if "features" in selection:
            for j, f in enumerate(scn.landmarks):
                res = feature_jacobian(x, f, scn.baseline)
                if res is None:
                    continue
                _, B = res
                row = np.zeros((4, lay.dim))
                row[:, vio] = vio_rows(B["theta"], B["p"], k)
                row[:, lay.landmark(j)] = B["f"]
                rows.append(row)
                labels += [("features", k, 4 * j + c) for c in range(4)]

    for model, name in (("inverse", "motion"), ("forward", "motion_forward")):
        if name not in selection:
            continue
        for k in range(len(states) - 1):
            dt = scn.times[k + 1] - scn.times[k]
            _, J = motion_residual(
                _pose(states[k]), _pose(states[k + 1]), scn.extrinsics,
                scn.windows[k + 1], scn.rbf, dt, model,
            )
            row = np.zeros((3, lay.dim))
            row[:, vio] = vio_rows(J.rot1, J.pos1, k) + vio_rows(J.rot2, J.pos2, k + 1)
            row[:, lay["ext_q"]] = J.ext_rot
            row[:, lay["ext_t"]] = J.ext_pos
            row[:, lay["rbf_lin"]] = J.rbf[:, :3]
            row[:, lay["rbf_ang"]] = J.rbf[:, 3:]
            rows.append(row)
            labels += [(name, k, c) for c in range(3)]

    prior_blocks = {
        "plane_angle": ["plane_q"],
        "position": ["p"],
        "extrinsics": ["ext_q", "ext_t"],
        "rbf": ["rbf_lin", "rbf_ang"],
    }
    for pname in priors:
        for block in prior_blocks[pname]:
            s = lay[block]
            row = np.zeros((s.stop - s.start, lay.dim))
            row[:, s] = np.eye(s.stop - s.start)
            rows.append(row)
            labels += [(f"prior_{pname}", 0, c) for c in range(s.stop - s.start)]

    return ObservabilityMatrix(np.vstack(rows), labels, lay)


def analytic_orientation_nullspace(
    scn: AugmentedState, layout: Layout, gravity: GravityModel | None = None
) -> NullspaceBasis:
    """Three columns for a global rotation of the world frame.

    Gravity stays fixed, so the rotation is compensated through the
    accelerometer bias (exact for rotation-free motion; the plane rows are
    annihilated for any planar motion).
    """
    g = (gravity or scn.gravity).g
    x0 = scn.states[0]
    N = np.zeros((layout.dim, 3))
    N[layout["theta"]] = x0.R.T
    N[layout["v"]] = -hat(x0.v)
    N[layout["ba"]] = x0.R.T @ hat(g)
    N[layout["p"]] = -hat(x0.p)
    if "plane_q" in layout:
        N[layout["plane_q"]] = -scn.plane.R_gw[:2, :]
    if "landmarks" in layout:
        for j, f in enumerate(scn.landmarks):
            N[layout.landmark(j)] = -hat(f)
    return NullspaceBasis(N, layout, "analytic")


def analytic_translation_nullspace(scn: AugmentedState, layout: Layout) -> NullspaceBasis:
    N = np.zeros((layout.dim, 3))
    N[layout["p"]] = np.eye(3)
    if "plane_d" in layout:
        N[layout["plane_d"]] = -scn.plane.R_gw[2:3, :]
    if "landmarks" in layout:
        for j in range(len(scn.landmarks)):
            N[layout.landmark(j)] = np.eye(3)
    return NullspaceBasis(N, layout, "analytic")


def analytic_rbf_nullspace(layout: Layout) -> NullspaceBasis:
    """Identity on the linear-channel RBF coordinates, zero elsewhere."""
    N = np.zeros((layout.dim, 3))
    N[layout["rbf_lin"]] = np.eye(3)
    return NullspaceBasis(N, layout, "analytic")


def numerical_nullspace(M, tol: float = 1e-8, layout: Layout | None = None) -> NullspaceBasis:
    """Right singular vectors with singular value below ``tol * s_max``."""
    if isinstance(M, ObservabilityMatrix):
        layout = layout or M.layout
        M = M.matrix
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    n = M.shape[1]
    layout = layout or Layout([("x", n)])
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        log.warning("all-zero matrix, nullspace is the whole space")
        return NullspaceBasis(np.eye(n), layout, "numerical", s)
    rank = int(np.sum(s > tol * s[0]))
    return NullspaceBasis(Vt[rank:].T.copy(), layout, "numerical", s)


def numerical_rank(M, tol: float = 1e-8) -> int:
    M = M.matrix if isinstance(M, ObservabilityMatrix) else np.asarray(M)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def rbf_block(M: ObservabilityMatrix, kind: str = "motion") -> np.ndarray:
    """Linear-velocity motion rows restricted to the linear RBF columns."""
    keep = [i for i, r in enumerate(M.rows) if r[0] == kind and r[2] == 0]
    return M.matrix[np.ix_(keep, range(M.layout["rbf_lin"].start, M.layout["rbf_lin"].stop))]


def _unit_columns(B: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(B, axis=0)
    return B / np.where(n > 0, n, 1.0)


@dataclass
class CandidateReport:
    name: str
    residual: float  # max |M_rownorm @ n_unit|
    max_principal_angle: float | None


@dataclass
class RankReport:
    rank: int
    nullspace_dim: int
    n_columns: int
    candidates: list[CandidateReport]
    singular_values: np.ndarray

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "nullspace_dim": self.nullspace_dim,
            "n_columns": self.n_columns,
            "candidates": [
                {"name": c.name, "residual": c.residual, "max_principal_angle": c.max_principal_angle}
                for c in self.candidates
            ],
        }


def rank_report(M, candidates: dict[str, NullspaceBasis | np.ndarray] | None = None, tol: float = 1e-8) -> RankReport:
    """Rank, nullspace dimension and the fit of each candidate basis.

    Candidate residuals use the row-normalized matrix and unit columns.
    The principal angle is the largest one between the candidate span and
    the numerical nullspace (zero iff the candidate lies inside it).
    """
    A = M.row_normalized() if isinstance(M, ObservabilityMatrix) else np.asarray(M, dtype=float)
    if not isinstance(M, ObservabilityMatrix):
        n = np.linalg.norm(A, axis=1, keepdims=True)
        A = A / np.where(n > 0, n, 1.0)
    null = numerical_nullspace(A, tol)
    out = []
    for name in sorted(candidates or {}):
        B = candidates[name]
        B = B.basis if isinstance(B, NullspaceBasis) else np.asarray(B, dtype=float)
        B = _unit_columns(B)
        res = float(np.abs(A @ B).max()) if A.size and B.size else 0.0
        ang = float(subspace_angles(B, null.basis).max()) if null.dim and B.size else None
        out.append(CandidateReport(name, res, ang))
    rank = A.shape[1] - null.dim
    return RankReport(rank, null.dim, A.shape[1], out, null.singular_values)
