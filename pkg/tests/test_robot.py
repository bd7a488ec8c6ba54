import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from irmpc.ltv import check_feasible
from irmpc.robot import (RobotBenchConfig, acceleration, coriolis, double_integrator, gravity, inertia,
                         robot_constraints, torque, torque_jacobian)

angles = st.floats(-2 * np.pi, 2 * np.pi)


def test_inertia_spot_value():
    np.testing.assert_allclose(inertia([0.3, 0.0]), [[250.0, 48.5], [48.5, 122.5]], rtol=1e-15)
    np.testing.assert_allclose(inertia([0.0, np.pi / 2]), [[200.0, 23.5], [23.5, 122.5]], atol=1e-12)


def test_gravity_spot_value():
    np.testing.assert_allclose(gravity([0.0, 0.0]), [1030.1, 245.3], rtol=1e-15)


def test_coriolis_as_printed():
    q, dq = np.array([0.0, np.pi / 2]), np.array([2.0, 3.0])
    np.testing.assert_allclose(coriolis(q, dq), 25.0 * np.array([[2.0, 5.0], [-2.0, 0.0]]), atol=1e-12)


def test_inertia_positive_definite_on_grid():
    q2 = np.linspace(-np.pi, np.pi, 1000)
    B = inertia(np.stack([np.zeros_like(q2), q2], -1))
    assert np.linalg.eigvalsh(B).min() > 0


@settings(max_examples=100, deadline=None)
@given(arrays(float, 4, elements=angles), arrays(float, 2, elements=st.floats(-100, 100)))
def test_transform_round_trip(x, v):
    np.testing.assert_allclose(acceleration(x, torque(x, v)), v, rtol=1e-12, atol=1e-12)


def test_torque_at_rest_is_gravity():
    np.testing.assert_array_equal(torque(np.zeros(4), np.zeros(2)), gravity([0.0, 0.0]))
    assert check_feasible(robot_constraints(), np.zeros(4), np.zeros(2))


def test_large_acceleration_is_infeasible():
    v = np.linalg.solve(inertia([0.0, 0.0]), [5000.0, 0.0])
    assert not check_feasible(robot_constraints(), np.zeros(4), v)


@settings(max_examples=30, deadline=None)
@given(arrays(float, 4, elements=angles), arrays(float, 2, elements=st.floats(-10, 10)))
def test_torque_jacobian_matches_finite_differences(x, v):
    Jx, Jv = torque_jacobian(x, v)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (torque(x + e, v) - torque(x - e, v)) / (2 * h)
        np.testing.assert_allclose(Jx[:, i], fd, atol=1e-4 * max(1.0, np.abs(fd).max()))
    np.testing.assert_allclose(Jv, inertia(x[:2]), rtol=1e-15)


def test_discretized_model():
    m = double_integrator(0.03)
    A, B = m.matrices(0)
    np.testing.assert_array_equal(A[:2, 2:], 0.03 * np.eye(2))
    np.testing.assert_allclose(B, np.vstack([0.00045 * np.eye(2), 0.03 * np.eye(2)]), rtol=1e-14)
    A5, B5 = m.matrices(500)
    assert np.array_equal(A, A5) and np.array_equal(B, B5)
    x = np.array([1.0, 2.0, 0.5, -0.5])
    np.testing.assert_allclose(m.f(0, x, np.zeros(2))[:2], x[:2] + 0.03 * x[2:], rtol=1e-15)


def test_zoh_against_matrix_exponential():
    from scipy.linalg import expm
    Ac = np.zeros((6, 6))
    Ac[:2, 2:4] = np.eye(2)
    Ac[2:4, 4:] = np.eye(2)
    E = expm(Ac * 0.03)
    A, B = double_integrator(0.03).matrices(0)
    np.testing.assert_allclose(A, E[:4, :4], atol=1e-15)
    np.testing.assert_allclose(B, E[:4, 4:], atol=1e-15)


def test_default_config_values():
    c = RobotBenchConfig()
    assert (c.t_s, c.N, c.M, c.k0) == (0.03, 10, 1200, 167)
    assert c.Q == (10.0, 10.0, 1.0, 1.0) and c.R == (1.0, 1.0)
    assert c.torque_limit == 4000.0 and c.velocity_limit == 1.5 * np.pi
    assert c.x0 == (-4.69, -1.62, 0.0, 0.0)


def test_config_round_trip_and_validation():
    c = RobotBenchConfig(N=12, steps=300)
    assert RobotBenchConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        RobotBenchConfig(steps=1100)
    with pytest.raises(ValueError):
        RobotBenchConfig(t_s=0.0)
    with pytest.raises(ValueError):
        RobotBenchConfig.from_dict({"horizon": 3})


def test_bench_terminal_weight(bench):
    I = np.eye(2)
    np.testing.assert_allclose(bench.P, np.block([[290.34 * I, 105.42 * I], [105.42 * I, 90.74 * I]]),
                               atol=0.01)
    with pytest.raises(ValueError):
        bench.terminal("elsewhere")
