import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from oracles import jacobian, random_scenario, rel_err
from planarvio import analysis
from planarvio.liegroups import Pose3, hat, so3_exp
from planarvio.motionmodel import RbfParams, motion_residual
from planarvio.observability import (
    AugmentedState,
    Layout,
    NullspaceBasis,
    analytic_orientation_nullspace,
    analytic_rbf_nullspace,
    analytic_translation_nullspace,
    build_observability,
    feature_jacobian,
    numerical_nullspace,
    numerical_rank,
    rank_report,
    rbf_block,
)
from planarvio.planeconstraint import PlaneParams, plane_residual
from planarvio.propagation import VioState, propagate_state
from planarvio.simulator import Scenario


@pytest.fixture(scope="module")
def varying():
    return analysis.observability_state(Scenario(profile="varying", duration=2.0, n_landmarks=12), 10)


@pytest.fixture(scope="module")
def straight():
    return analysis.observability_state(Scenario(profile="straight", duration=2.0, n_landmarks=12), 10)


# layout and state


def test_full_layout_dimension(varying):
    L = len(varying.landmarks)
    assert Layout.full(L).dim == 15 + 3 + 6 + 6 + 3 * L == varying.error_dim
    M = build_observability(varying, ("plane", "motion", "features"), layout="full")
    assert M.matrix.shape[1] == varying.error_dim


def test_selected_layout_drops_untouched_blocks():
    lay = Layout.for_selection(("plane",))
    assert "plane_d" in lay and "ext_q" in lay and "rbf_lin" not in lay and "landmarks" not in lay
    assert lay.dim == 15 + 3 + 6
    assert "rbf_lin" in Layout.for_selection(("motion_forward",))
    assert len(Layout.full().labels()) == 30


def test_empty_selection_rejected(varying):
    with pytest.raises(ValueError):
        build_observability(varying, ())
    with pytest.raises(ValueError):
        build_observability(varying, ("lidar",))


# feature rows


def test_feature_jacobian_on_axis():
    z, B = feature_jacobian(VioState(), [0.0, 0.0, 1.0], baseline=0.1)
    assert_allclose(z[:2], [0, 0])
    assert_allclose(B["f"][:2], [[1, 0, 0], [0, 1, 0]])


def test_feature_jacobian_behind_camera(caplog):
    with caplog.at_level(logging.WARNING):
        assert feature_jacobian(VioState(), [0.0, 0.0, -1.0]) is None
    assert "behind camera" in caplog.text


def test_feature_jacobian_finite_differences(rng):
    for _ in range(100):
        x = VioState(R=so3_exp(rng.normal(scale=0.3, size=3)), p=rng.normal(scale=0.3, size=3))
        f = x.R @ np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)]) + x.p
        _, B = feature_jacobian(x, f)
        n_th = jacobian(lambda d: feature_jacobian(VioState(R=x.R @ so3_exp(d), p=x.p), f)[0], 3)
        n_p = jacobian(lambda d: feature_jacobian(VioState(R=x.R, p=x.p + d), f)[0], 3)
        n_f = jacobian(lambda d: feature_jacobian(x, f + d)[0], 3)
        assert rel_err(B["theta"], n_th) < 1e-6
        assert rel_err(B["p"], n_p) < 1e-6
        assert rel_err(B["f"], n_f) < 1e-6


def test_feature_rows_annihilate_translation(rng):
    x = VioState(R=so3_exp([0.1, -0.2, 0.3]), p=[0.2, 0.1, 0.0])
    f = x.R @ np.array([0.3, -0.2, 3.0]) + x.p
    _, B = feature_jacobian(x, f)
    assert_allclose(B["p"] + B["f"], 0.0, atol=1e-15)
    z0 = feature_jacobian(x, f)[0]
    t = rng.normal(size=3)
    assert_allclose(feature_jacobian(VioState(R=x.R, p=x.p + t), f + t)[0], z0, atol=1e-14)


# rows versus end-to-end finite differences


def _measurements(scn: AugmentedState, dx: np.ndarray, lay: Layout, selection):
    """Residual stack with every parameter perturbed, states re-propagated."""
    x0 = scn.states[0].retract(dx[:15])
    pq, pd = dx[lay["plane_q"]], dx[lay["plane_d"]][0]
    plane = PlaneParams(so3_exp([pq[0], pq[1], 0.0]) @ scn.plane.R_gw, scn.plane.d + pd)
    E = scn.extrinsics
    ext = Pose3.from_rt(E.R @ so3_exp(dx[lay["ext_q"]]), E.t + dx[lay["ext_t"]])
    rbf = RbfParams.from_array(scn.rbf.as_array() + np.concatenate([dx[lay["rbf_lin"]], dx[lay["rbf_ang"]]]))
    states = [x0]
    for k in range(1, len(scn.times)):
        states.append(propagate_state(states[-1], scn.imu.between(scn.times[k - 1], scn.times[k]), scn.gravity))
    out = []
    for k, x in enumerate(states):
        T = Pose3.from_rt(x.R, x.p)
        if "plane" in selection:
            out.append(plane_residual(T, ext, plane).as_array())
        if "features" in selection:
            for j, f in enumerate(scn.landmarks):
                if feature_jacobian(scn.states[k], f, scn.baseline) is None:
                    continue
                out.append(feature_jacobian(x, f + dx[lay.landmark(j)], scn.baseline)[0])
    if "motion" in selection:
        for k in range(len(states) - 1):
            T1, T2 = (Pose3.from_rt(s.R, s.p) for s in states[k : k + 2])
            dt = scn.times[k + 1] - scn.times[k]
            out.append(motion_residual(T1, T2, ext, scn.windows[k + 1], rbf, dt)[0])
    return np.concatenate(out)


def test_rows_match_finite_differences():
    scn = analysis.observability_state(Scenario(profile="varying", duration=1.5, n_landmarks=4), 4)
    sel = ("plane", "features", "motion")
    lay = Layout.full(len(scn.landmarks))
    M = build_observability(scn, sel, layout=lay)
    num = jacobian(lambda d: _measurements(scn, d, lay, sel), lay.dim, eps=1e-6)
    assert num.shape == M.matrix.shape
    assert rel_err(M.matrix, num) < 1e-5


# plane rows


def test_plane_rows_pattern(varying):
    M = build_observability(varying, ("plane",), layout="full")
    d = M.matrix[:, M.layout["plane_d"]].ravel()
    comp = np.array([r[2] for r in M.rows])
    assert np.all(d[comp == 2] == 1.0) and np.all(d[comp != 2] == 0.0)
    assert np.all(M.matrix[:, M.layout["rbf_lin"]] == 0) and np.all(M.matrix[:, M.layout["rbf_ang"]] == 0)


def test_two_step_plane_d_column():
    scn = analysis.observability_state(Scenario(profile="straight", duration=1.5, n_landmarks=0), 2)
    M = build_observability(scn, ("plane",))
    assert [M.matrix[i, M.layout["plane_d"]][0] for i in range(len(M.rows)) if M.rows[i][2] == 2] == [1.0, 1.0]


def test_orientation_nullspace_stationary_blocks():
    scn = analysis.observability_state(Scenario(profile="stationary", duration=1.5, n_landmarks=0), 3)
    scn.states[0] = VioState(R=scn.states[0].R)  # at rest at the origin
    N = analytic_orientation_nullspace(scn, Layout.full())
    assert np.all(N.block("v") == 0) and np.all(N.block("p") == 0)
    for name in ("bg", "plane_d", "ext_q", "ext_t", "rbf_lin", "rbf_ang"):
        assert np.all(N.block(name) == 0)


def test_plane_product_random_scenarios(rng):
    for _ in range(20):
        scn = analysis.observability_state(random_scenario(rng), 10)
        assert analysis.plane_product(scn) < 1e-8


def test_plane_product_independent_of_landmarks(varying):
    M = build_observability(varying, ("plane",))
    N = analytic_orientation_nullspace(varying, M.layout)
    assert np.abs(M.row_normalized() @ N.basis).max() < 1e-8


def test_orientation_in_plane_motion_nullspace_rotation_free(straight):
    M = build_observability(straight, ("plane", "motion"), layout="full")
    rep = rank_report(M, {"orientation": analytic_orientation_nullspace(straight, M.layout)})
    assert rep.candidates[0].residual < 1e-8
    assert rep.candidates[0].max_principal_angle < 1e-6


def test_yaw_about_gravity_always_null(varying):
    # columns are indexed by a world-frame rotation; the gravity axis survives any motion
    M = build_observability(varying, ("plane", "motion", "features"), layout="full")
    yaw = analytic_orientation_nullspace(varying, M.layout).basis @ np.array([0.0, 0.0, 1.0])
    assert np.abs(M.row_normalized() @ (yaw / np.linalg.norm(yaw))).max() < 1e-8


def test_d_never_in_nullspace(varying):
    r = analysis.d_direction(varying)
    assert r["d_column_exact"]
    assert r["d_nullspace_component"] < 1e-10


# feature-only gauge


def test_feature_only_nullspace_dimension(varying):
    M = build_observability(varying, ("features",))
    assert numerical_nullspace(M).dim == 4
    T = analytic_translation_nullspace(varying, M.layout)
    rep = rank_report(M, {"translation": T})
    assert rep.candidates[0].max_principal_angle < 1e-6


def test_plane_and_prior_remove_orientation(varying):
    r = analysis.orientation_projection(varying)
    assert r["feature_nullspace_dim"] == 4
    assert r["with_plane_nullspace_dim"] == 3
    assert r["max_orientation_projection"] < 1e-6


def test_adding_rows_reduces_nullspace_by_their_rank(varying):
    lay = Layout.for_selection(("features", "plane"), len(varying.landmarks))
    A = build_observability(varying, ("features",), layout=lay).matrix
    B = build_observability(varying, ("plane",), layout=lay).matrix
    dim = lambda X: numerical_nullspace(X).dim
    assert dim(np.vstack([A, B])) == lay.dim - numerical_rank(np.vstack([A, B]))
    assert dim(np.vstack([A, B])) <= dim(A)


# motion rows and RBF block


def test_forward_inverse_ranks_random(rng):
    for _ in range(10):
        scn = analysis.observability_state(random_scenario(rng, n_landmarks=0), 10)
        inv, fwd = analysis.motion_ranks(scn)
        assert inv == fwd


def test_rbf_nullspace_structure():
    lay = Layout.full()
    N = analytic_rbf_nullspace(lay)
    assert_allclose(N.block("rbf_lin"), np.eye(3))
    assert np.count_nonzero(N.basis) == 3


def test_rbf_product_equals_block(varying):
    M = build_observability(varying, ("motion",), layout="full")
    N = analytic_rbf_nullspace(M.layout).basis
    P = M.matrix @ N
    lin = [i for i, r in enumerate(M.rows) if r[2] == 0]
    other = [i for i, r in enumerate(M.rows) if r[2] != 0]
    assert_allclose(P[lin], rbf_block(M), atol=0)
    assert np.all(P[other] == 0)


def test_rbf_block_straight_degenerate(straight):
    s = analysis.rbf_summary(straight)
    assert max(s["column_max"]["mu"], s["column_max"]["sigma"]) < 1e-12
    assert s["rank"] <= 1
    assert s["unobservable"] == ["mu", "sigma"]


def test_rbf_block_varying_full_rank(varying):
    s = analysis.rbf_summary(varying)
    assert s["rank"] == 3
    assert s["condition_ratio"] > 1e-8


# numerical tools


def test_zero_matrix(caplog):
    with caplog.at_level(logging.WARNING):
        rep = rank_report(np.zeros((4, 3)), {"c": np.eye(3)[:, :1]})
    assert rep.rank == 0 and rep.nullspace_dim == 3
    assert rep.candidates[0].residual == 0.0
    assert "all-zero" in caplog.text


def test_numerical_nullspace_rejects_nan():
    with pytest.raises(ValueError):
        numerical_nullspace(np.array([[np.nan, 1.0]]))


def test_nullspace_known_matrix(rng):
    A = rng.normal(size=(10, 4)) @ rng.normal(size=(4, 7))
    N = numerical_nullspace(A)
    assert N.dim == 3 and N.provenance == "numerical"
    assert np.abs(A @ N.basis).max() < 1e-10
    assert numerical_rank(A) == 4


def test_rank_report_ordering_and_angles(rng):
    A = np.hstack([rng.normal(size=(6, 3)), np.zeros((6, 2))])
    cands = {"z": np.eye(5)[:, 3:], "a": np.eye(5)[:, :1]}
    rep = rank_report(A, cands)
    assert [c.name for c in rep.candidates] == ["a", "z"]
    assert rep.candidates[1].residual == 0.0 and rep.candidates[1].max_principal_angle < 1e-12
    assert rep.candidates[0].max_principal_angle == pytest.approx(np.pi / 2)
    assert rep.as_dict()["nullspace_dim"] == 2


def test_analytic_bases_independent(varying):
    lay = Layout.full(len(varying.landmarks))
    for N in (
        analytic_orientation_nullspace(varying, lay),
        analytic_translation_nullspace(varying, lay),
        analytic_rbf_nullspace(lay),
    ):
        B = N.basis / np.linalg.norm(N.basis, axis=0)
        assert np.linalg.svd(B, compute_uv=False).min() > 1e-10
        assert isinstance(N, NullspaceBasis) and N.provenance == "analytic"


def test_orientation_basis_blocks(varying):
    lay = Layout.full(len(varying.landmarks))
    N = analytic_orientation_nullspace(varying, lay)
    x0 = varying.states[0]
    assert_allclose(N.block("theta"), x0.R.T)
    assert_allclose(N.block("ba"), x0.R.T @ hat(varying.gravity.g))
    assert_allclose(N.block("plane_q"), -varying.plane.R_gw[:2, :])
