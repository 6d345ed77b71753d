import numpy as np
import pytest
from numpy.testing import assert_allclose

from oracles import jacobian, random_rotation, rel_err
from planarvio.liegroups import hat
from planarvio.propagation import (
    POS,
    ROT,
    VEL,
    GravityModel,
    ImuSamples,
    TransitionMatrix,
    VioState,
    augment,
    propagate_state,
    propagate_with_transition,
    transition_matrix,
)

G = GravityModel()


def smooth_imu(t0, t1, rate, seed=0):
    rng = np.random.default_rng(seed)
    a_g, f_g = rng.normal(scale=0.5, size=(2, 3)), rng.uniform(0.5, 3.0, size=(2, 3))
    a_f, f_f = rng.normal(scale=1.0, size=(2, 3)), rng.uniform(0.5, 3.0, size=(2, 3))
    n = int(round((t1 - t0) * rate)) + 1
    t = np.linspace(t0, t1, n)[:, None]
    gyro = a_g[0] * np.sin(f_g[0] * t) + a_g[1] * np.cos(f_g[1] * t)
    accel = a_f[0] * np.sin(f_f[0] * t) + a_f[1] * np.cos(f_f[1] * t) + np.array([0, 0, 9.81])
    return ImuSamples(t[:, 0], gyro, accel)


def random_state(rng):
    return VioState(
        random_rotation(rng), rng.normal(scale=0.01, size=3), rng.normal(size=3),
        rng.normal(scale=0.05, size=3), rng.normal(size=3),
    )


def test_stationary_unchanged():
    n = 101
    x0 = VioState(p=[1.0, 2.0, 3.0])
    s = ImuSamples(np.linspace(0, 1, n), np.zeros((n, 3)), np.tile(-G.g, (n, 1)))
    x = propagate_state(x0, s, G)
    assert_allclose(x.R, np.eye(3), atol=1e-15)
    assert_allclose(x.v, 0.0, atol=1e-14)
    assert_allclose(x.p, x0.p, atol=1e-14)


def test_constant_acceleration():
    n = 11
    s = ImuSamples(np.linspace(0, 1, n), np.zeros((n, 3)), np.tile(-G.g + [1.0, 0, 0], (n, 1)))
    x = propagate_state(VioState(), s, G)
    assert_allclose(x.v, [1, 0, 0], atol=1e-13)
    assert_allclose(x.p, [0.5, 0, 0], atol=1e-13)


def test_second_order_convergence():
    x0 = VioState(v=[0.3, 0.0, 0.1])
    ends = [propagate_state(x0, smooth_imu(0.0, 1.0, r, seed=4), G) for r in (50, 100, 200)]
    d1 = np.linalg.norm(ends[0].p - ends[1].p)
    d2 = np.linalg.norm(ends[1].p - ends[2].p)
    assert 3.0 < d1 / d2 < 5.0


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        propagate_state(VioState(), ImuSamples(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))))


def test_timestamps_strictly_increasing():
    with pytest.raises(ValueError):
        ImuSamples([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))


def test_gravity_magnitude_checked():
    with pytest.raises(ValueError):
        GravityModel(np.array([0.0, 0.0, -9.0]))


def test_zero_duration_transition_is_identity():
    s = ImuSamples([0.0], np.zeros((1, 3)), np.zeros((1, 3)))
    assert_allclose(transition_matrix(VioState(), s, G).phi, np.eye(15))


def test_transition_finite_differences(rng):
    for trial in range(50):
        x0 = random_state(rng)
        dur = rng.uniform(0.1, 1.0)
        s = smooth_imu(0.0, dur, 200, seed=trial)
        x1, T = propagate_with_transition(x0, s, G)

        def f(d):
            return x1.local(propagate_state(x0.retract(d), s, G))

        assert rel_err(T.phi, jacobian(f, 15)) < 1e-5


def test_transition_blocks(rng):
    x0 = random_state(rng)
    s = smooth_imu(0.0, 0.7, 200, seed=1)
    x1, T = propagate_with_transition(x0, s, G)
    dt = s.t[-1] - s.t[0]
    assert_allclose(T.block(1, 1), x1.R.T @ x0.R, atol=1e-12)
    assert_allclose(T.block(5, 3), dt * np.eye(3), atol=1e-12)
    assert_allclose(T.phi[POS, VEL], T.block(5, 3))
    # position response to an initial right rotation perturbation
    expect = hat(x0.p + x0.v * dt + 0.5 * G.g * dt**2 - x1.p) @ x0.R
    assert_allclose(T.block(5, 1), expect, atol=1e-10)


def test_stationary_position_rotation_block():
    n = 201
    R0 = random_rotation(np.random.default_rng(8))
    x0 = VioState(R=R0)
    s = ImuSamples(np.linspace(0, 1.0, n), np.zeros((n, 3)), np.tile(-R0.T @ G.g, (n, 1)))
    T = transition_matrix(x0, s, G)
    # right-perturbation form of -hat(g dt^2 / 2) R^w_i (sign flips with the JPL convention)
    assert_allclose(T.block(5, 1), hat(0.5 * G.g * 1.0**2) @ R0, atol=1e-8)


def test_rotation_free_block_is_identity():
    n = 101
    s = ImuSamples(np.linspace(0, 1, n), np.zeros((n, 3)), np.tile([0.2, -0.1, 9.81], (n, 1)))
    T = transition_matrix(VioState(), s, G)
    assert np.abs(T.block(1, 1) - np.eye(3)).max() < 1e-9


def test_composition(rng):
    for trial in range(10):
        x0 = random_state(rng)
        s = smooth_imu(0.0, 1.0, 200, seed=trial)
        k = rng.integers(20, 180)
        a = ImuSamples(s.t[: k + 1], s.gyro[: k + 1], s.accel[: k + 1])
        b = ImuSamples(s.t[k:], s.gyro[k:], s.accel[k:])
        xa, Ta = propagate_with_transition(x0, a, G)
        _, Tb = propagate_with_transition(xa, b, G)
        T = transition_matrix(x0, s, G)
        assert_allclose((Tb @ Ta).phi, T.phi, atol=1e-6)
        assert (Tb @ Ta).t0 == T.t0 and (Tb @ Ta).t1 == T.t1


def test_augment(rng):
    assert_allclose(augment(np.eye(15)).phi, np.eye(30))
    P1, P2 = rng.normal(size=(2, 15, 15))
    A = augment(TransitionMatrix(P1, 0, 1), 15)
    assert np.array_equal(A.parameter_block, np.eye(15))
    assert np.all(A.phi[:15, 15:] == 0) and np.all(A.phi[15:, :15] == 0)
    assert_allclose(augment(P2 @ P1).phi, augment(P2).phi @ augment(P1).phi, atol=1e-12)


def test_state_retract_local_round_trip(rng):
    x = random_state(rng)
    d = rng.normal(scale=0.3, size=15)
    assert_allclose(x.local(x.retract(d)), d, atol=1e-12)
    assert_allclose(x.retract(np.zeros(15)).R, x.R)
    assert ROT == slice(0, 3)
