"""Experiments shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import estimator as est_mod
from . import observability as obs
from .simulator import NoiseConfig, Scenario, generate


def warmup_frame(scenario: Scenario) -> int:
    """First frame whose command window holds only post-standstill commands."""
    t = scenario.still_time + (scenario.window_size - 1) / scenario.command_rate
    return int(math.ceil(t * scenario.frame_rate - 1e-9))


def observability_state(scenario: Scenario, frames: int = 10, first: int | None = None) -> obs.AugmentedState:
    """Noise-free linearization points over ``frames`` frames after warm-up."""
    sc = replace(scenario, noise=NoiseConfig.zero())
    truth, log_ = generate(sc)
    first = warmup_frame(sc) if first is None else first
    count = min(frames, len(truth.frame_times) - first)
    return obs.AugmentedState.from_simulation(truth, log_, first=first, count=count)


def _orthonormal(B: np.ndarray) -> np.ndarray:
    u, s, _ = np.linalg.svd(B, full_matrices=False)
    return u[:, s > 1e-12 * max(s.max(), 1e-300)]


def orientation_projection(scn: obs.AugmentedState, tol: float = 1e-8) -> dict:
    """How much of the orientation directions survives in the nullspace.

    Rows: stereo features plus plane rows, with a plane-angle prior and the
    calibrated (prior) extrinsics.  The orientation candidates are first
    made orthogonal to the global-translation gauge, which stays
    unobservable.  Returns the feature-only nullspace dimension and the
    largest projection of a unit orientation direction on the remaining
    nullspace.
    """
    L = len(scn.landmarks)
    M_f = obs.build_observability(scn, ("features",))
    null_f = obs.numerical_nullspace(M_f, tol)
    lay = obs.Layout.for_selection(("features", "plane"), L, ("plane_angle", "extrinsics"))
    M = obs.build_observability(scn, ("features", "plane"), ("plane_angle", "extrinsics"), layout=lay)
    null = obs.numerical_nullspace(M, tol)
    Q = _orthonormal(obs.analytic_translation_nullspace(scn, lay).basis)
    O = obs.analytic_orientation_nullspace(scn, lay).basis

    # yaw about gravity as found in the feature-only nullspace
    Qf = _orthonormal(obs.analytic_translation_nullspace(scn, M_f.layout).basis)
    Y = null_f.basis - Qf @ (Qf.T @ null_f.basis)
    yaw_f = _orthonormal(Y)[:, :1]
    yaw = np.zeros((lay.dim, yaw_f.shape[1]))
    for name, _ in M_f.layout.blocks:
        yaw[lay[name]] = yaw_f[M_f.layout[name]]

    D = np.hstack([O, yaw])
    D = D - Q @ (Q.T @ D)
    D = D / np.linalg.norm(D, axis=0)
    proj = np.linalg.norm(null.basis.T @ D, axis=0) if null.dim else np.zeros(D.shape[1])
    return {
        "feature_nullspace_dim": null_f.dim,
        "with_plane_nullspace_dim": null.dim,
        "max_orientation_projection": float(proj.max()),
    }


def d_direction(scn: obs.AugmentedState, tol: float = 1e-8) -> dict:
    """Response of the plane rows to the ``d`` coordinate, and its nullspace share.

    The nullspace is taken with the first frame's position, the plane angle
    and the extrinsics held by priors (the gauge the plane analysis assumes).
    """
    M = obs.build_observability(scn, ("plane",), layout="full")
    col = M.matrix[:, M.layout["plane_d"]].ravel()
    expected = np.array([1.0 if r[2] == 2 else 0.0 for r in M.rows])
    Mp = obs.build_observability(scn, ("plane",), ("position", "plane_angle", "extrinsics"))
    null = obs.numerical_nullspace(Mp, tol)
    comp = float(np.abs(null.block("plane_d")).max()) if null.dim else 0.0
    return {"d_column_exact": bool(np.array_equal(col, expected)), "d_nullspace_component": comp}


def plane_product(scn: obs.AugmentedState) -> float:
    """max |M^plane N_o| after row normalization."""
    M = obs.build_observability(scn, ("plane",), layout="full")
    rep = obs.rank_report(M, {"orientation": obs.analytic_orientation_nullspace(scn, M.layout)})
    return rep.candidates[0].residual


def motion_ranks(scn: obs.AugmentedState, tol: float = 1e-8) -> tuple[int, int]:
    inv = obs.build_observability(scn, ("motion",), layout="full")
    fwd = obs.build_observability(scn, ("motion_forward",), layout="full")
    return obs.numerical_rank(inv, tol), obs.numerical_rank(fwd, tol)


def rbf_summary(scn: obs.AugmentedState) -> dict:
    M = obs.build_observability(scn, ("motion",), layout="full")
    B = obs.rbf_block(M)
    s = np.linalg.svd(B, compute_uv=False)
    cols = np.abs(B).max(axis=0)
    return {
        "rank": obs.numerical_rank(B),
        "singular_values": [float(x) for x in s],
        "condition_ratio": float(s[-1] / s[0]) if s[0] > 0 else 0.0,
        "column_max": dict(zip(("s", "mu", "sigma"), map(float, cols))),
        "unobservable": [n for n, c in zip(("s", "mu", "sigma"), cols) if c < 1e-12],
    }


def observability_tables(scn: obs.AugmentedState, measurements, tol: float = 1e-8):
    """Rank rows and candidate-residual rows for the CLI reports."""
    rank_rows, cand_rows = [], []
    analyses = [("selected", tuple(measurements))]
    analyses += [(m, (m,)) for m in measurements]
    for name, sel in analyses:
        M = obs.build_observability(scn, sel)
        cands = {
            "orientation": obs.analytic_orientation_nullspace(scn, M.layout),
            "translation": obs.analytic_translation_nullspace(scn, M.layout),
        }
        if "rbf_lin" in M.layout:
            cands["rbf"] = obs.analytic_rbf_nullspace(M.layout)
        if "plane_d" in M.layout:
            e = np.zeros((M.layout.dim, 1))
            e[M.layout["plane_d"]] = 1.0
            cands["d_direction"] = e
        rep = obs.rank_report(M, cands, tol)
        rank_rows.append([name, "+".join(sel), M.matrix.shape[0], M.matrix.shape[1], rep.rank, rep.nullspace_dim])
        for c in rep.candidates:
            ang = "" if c.max_principal_angle is None else c.max_principal_angle
            cand_rows.append([name, c.name, c.residual, ang])
    return rank_rows, cand_rows


def estimate(scenario: Scenario, config: est_mod.EstimatorConfig | None = None):
    """Simulate, solve and compare with the truth."""
    truth, log_ = generate(scenario)
    problem = est_mod.build_problem(log_, truth, config)
    report = est_mod.solve(problem)
    e = report.estimate
    rbf_true = truth.rbf.as_array()
    names = ("s_lin", "mu_lin", "sigma_lin", "s_ang", "mu_ang", "sigma_ang")
    errors = {
        "plane_angle_deg": math.degrees(est_mod.plane_angle_error(e.plane, truth.plane)),
        "plane_d": float(e.plane.d - truth.plane.d),
        "gravity_direction_deg": math.degrees(est_mod.gravity_direction_error(e.states[0], truth.states[0])),
        "rbf_relative": {n: float((a - b) / b) for n, a, b in zip(names, e.rbf, rbf_true)},
        "final_position": float(np.linalg.norm(e.states[-1].p - truth.states[-1].p)),
    }
    return report, errors, truth
