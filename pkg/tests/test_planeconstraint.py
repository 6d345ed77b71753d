import numpy as np
import pytest
from numpy.testing import assert_allclose

from oracles import jacobian, random_rotation, rel_err
from planarvio.liegroups import Pose3, so3_exp, so3_log, so3_to_zero_yaw
from planarvio.planeconstraint import E3, PlaneParams, plane_jacobians, plane_residual


def random_config(rng):
    T_wi = Pose3.from_rt(random_rotation(rng), rng.normal(size=3))
    T_bi = Pose3.from_rt(random_rotation(rng, 0.5), rng.normal(scale=0.3, size=3))
    plane = PlaneParams.from_tilt(*rng.normal(scale=0.3, size=2), rng.normal())
    return T_wi, T_bi, plane


def test_aligned_zero_case():
    r = plane_residual(Pose3(), Pose3(), PlaneParams(np.eye(3), 0.0))
    assert_allclose(r.as_array(), 0.0)


def test_distance_cancels_height():
    T = Pose3.from_rt(np.eye(3), [0, 0, -2])
    assert plane_residual(T, Pose3(), PlaneParams(np.eye(3), 2.0)).r2 == 0.0


def test_pitched_imu():
    R = so3_exp([0.0, 0.1, 0.0])
    r = plane_residual(Pose3.from_rt(R, np.zeros(3)), Pose3(), PlaneParams(np.eye(3), 0.0))
    # direct evaluation: third column of a pitch matrix
    Ry = np.array([[np.cos(0.1), 0, np.sin(0.1)], [0, 1, 0], [-np.sin(0.1), 0, np.cos(0.1)]])
    assert_allclose(r.r1, Ry[:2, 2], atol=1e-15)
    assert_allclose(r.r1, [np.sin(0.1), 0.0], atol=1e-15)


def test_residual_definition(rng):
    for _ in range(20):
        T_wi, T_bi, plane = random_config(rng)
        R_gw = plane.R_gw
        u = R_gw @ T_wi.R @ T_bi.R.T @ E3
        r2 = plane.d + E3 @ R_gw @ (T_wi.t - T_wi.R @ T_bi.R.T @ T_bi.t)
        r = plane_residual(T_wi, T_bi, plane)
        assert_allclose(r.r1, u[:2], atol=1e-14)
        assert r.r2 == pytest.approx(r2, abs=1e-14)


def test_plane_gauge_is_zero_yaw(rng):
    for _ in range(50):
        plane = PlaneParams.from_normal(rng.normal(size=3), 0.0)
        assert abs(so3_log(plane.R_gw)[2]) < 1e-9
        assert abs(plane.yaw()) < 1e-9
        p2 = plane.retract([0.1, -0.2, 0.3])
        assert abs(p2.yaw()) < 1e-9


def test_plane_normal_points_up_for_untilted():
    assert_allclose(PlaneParams.from_tilt(0.0, 0.0, 1.0).normal, E3)
    assert_allclose(so3_to_zero_yaw([0, 0, -1]) @ [0, 0, -1], E3, atol=1e-15)


def test_jacobian_examples():
    J = plane_jacobians(Pose3(), Pose3(), PlaneParams(np.eye(3), 0.3))
    assert_allclose(J["H2_d"], [[1.0]])
    assert_allclose(J["H2_t_i"], [[0, 0, 1]])
    rng = np.random.default_rng(3)
    for _ in range(10):
        assert plane_jacobians(*random_config(rng))["H2_d"][0, 0] == 1.0


def _res(T_wi, T_bi, plane):
    return plane_residual(T_wi, T_bi, plane).as_array()


def test_jacobians_finite_differences(rng):
    for _ in range(200):
        T_wi, T_bi, plane = random_config(rng)
        J = plane_jacobians(T_wi, T_bi, plane)
        H_q_i = np.vstack([J["H1_q_i"], J["H2_q_i"]])
        H_t_i = np.vstack([np.zeros((2, 3)), J["H2_t_i"]])
        H_q_gw = np.vstack([J["H1_q_gw"], J["H2_q_gw"]])
        H_q_bi = np.vstack([J["H1_q_bi"], J["H2_q_bi"]])
        H_t_bi = np.vstack([np.zeros((2, 3)), J["H2_t_bi"]])

        n_q_i = jacobian(lambda d: _res(Pose3.from_rt(T_wi.R @ so3_exp(d), T_wi.t), T_bi, plane), 3)
        n_t_i = jacobian(lambda d: _res(Pose3.from_rt(T_wi.R, T_wi.t + d), T_bi, plane), 3)
        # raw left perturbation of R_gw along the two tangent axes
        n_q_gw = jacobian(
            lambda d: _res(T_wi, T_bi, PlaneParams(so3_exp([d[0], d[1], 0.0]) @ plane.R_gw, plane.d)), 2
        )
        n_d = jacobian(lambda d: _res(T_wi, T_bi, PlaneParams(plane.R_gw, plane.d + d[0])), 1)
        n_q_bi = jacobian(lambda d: _res(T_wi, Pose3.from_rt(T_bi.R @ so3_exp(d), T_bi.t), plane), 3)
        n_t_bi = jacobian(lambda d: _res(T_wi, Pose3.from_rt(T_bi.R, T_bi.t + d), plane), 3)

        assert rel_err(H_q_i, n_q_i) < 1e-5
        assert rel_err(H_t_i, n_t_i) < 1e-5
        assert rel_err(H_q_gw, n_q_gw) < 1e-5
        assert rel_err(np.array([[0], [0], J["H2_d"][0]]), n_d) < 1e-5
        assert rel_err(H_q_bi, n_q_bi) < 1e-5
        assert rel_err(H_t_bi, n_t_bi) < 1e-5


def test_global_rotation_leaves_residual_magnitudes(rng):
    # rotating the world (poses and plane) only re-gauges r1 by a yaw
    for _ in range(50):
        T_wi, T_bi, plane = random_config(rng)
        G = random_rotation(rng)
        T2 = Pose3.from_rt(G @ T_wi.R, G @ T_wi.t)
        plane2 = PlaneParams.from_normal(G @ plane.normal, plane.d)
        r, r_rot = plane_residual(T_wi, T_bi, plane), plane_residual(T2, T_bi, plane2)
        assert r_rot.r2 == pytest.approx(r.r2, abs=1e-12)
        assert np.linalg.norm(r_rot.r1) == pytest.approx(np.linalg.norm(r.r1), abs=1e-12)


def test_r2_invariant_under_yaw_about_normal(rng):
    for _ in range(50):
        plane = PlaneParams.from_tilt(*rng.normal(scale=0.3, size=2), rng.normal())
        n = plane.normal
        # base frame with z along the normal, IMU mounted above the base origin
        R_wb = plane.R_gw.T @ so3_exp([0, 0, rng.uniform(-np.pi, np.pi)])
        T_bi = Pose3.from_rt(random_rotation(rng, 0.5), [0.0, 0.0, rng.uniform(0.1, 0.5)])
        R_wi = R_wb @ T_bi.R
        t_wi = rng.normal(size=3)
        psi = rng.uniform(-np.pi, np.pi)
        Rn = so3_exp(psi * n)
        a = plane_residual(Pose3.from_rt(R_wi, t_wi), T_bi, plane)
        b = plane_residual(Pose3.from_rt(Rn @ R_wi, t_wi), T_bi, plane)
        assert b.r2 == pytest.approx(a.r2, abs=1e-12)
        assert_allclose(a.r1, 0.0, atol=1e-12)


def test_retract_yaw_jacobian(rng):
    for _ in range(50):
        plane = PlaneParams.from_tilt(*rng.normal(scale=0.4, size=2), 0.0)

        def yaw_removed(d):
            # yaw taking the regauged rotation back to the raw perturbed one
            R_raw = so3_exp([d[0], d[1], 0.0]) @ plane.R_gw
            M = R_raw @ plane.retract([d[0], d[1], 0.0]).R_gw.T
            return np.array([np.arctan2(M[1, 0], M[0, 0])])

        assert rel_err(plane.retract_yaw_jacobian()[None], jacobian(yaw_removed, 2)) < 1e-6
    assert_allclose(PlaneParams(np.eye(3), 0.0).retract_yaw_jacobian(), 0.0)


def test_regauged_residual_jacobian(rng):
    # the tilt Jacobian through retract picks up the gauge yaw acting on r1
    for _ in range(50):
        T_wi, T_bi, plane = random_config(rng)
        J = plane_jacobians(T_wi, T_bi, plane)
        r = _res(T_wi, T_bi, plane)
        H = np.vstack([J["H1_q_gw"], J["H2_q_gw"]])
        H[:2] -= np.outer([-r[1], r[0]], plane.retract_yaw_jacobian())
        num = jacobian(lambda d: _res(T_wi, T_bi, plane.retract([d[0], d[1], 0.0])), 2)
        assert rel_err(H, num) < 1e-5
