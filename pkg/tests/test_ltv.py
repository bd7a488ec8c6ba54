import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from irmpc.errors import DimensionError
from irmpc.ltv import (LtvModel, TimeGrid, affine_constraints, box_constraints, check_feasible,
                       no_constraints, rollout, step)
from irmpc.robot import double_integrator, robot_constraints, velocity_constraints

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_zero_state_zero_input():
    m = double_integrator(0.03)
    assert np.array_equal(step(m, 0, np.zeros(4), np.zeros(2)), np.zeros(4))


def test_identity_a_zero_b():
    m = LtvModel.lti(np.eye(2), np.zeros((2, 1)), 1.0)
    assert np.array_equal(step(m, 3, [1.0, 2.0], [5.0]), [1.0, 2.0])


def test_double_integrator_step():
    m = double_integrator(0.03)
    np.testing.assert_allclose(step(m, 0, [0, 0, 1, 1], [0, 0]), [0.03, 0.03, 1, 1], rtol=0, atol=1e-15)


def test_step_rejects_bad_dimensions():
    m = double_integrator(0.03)
    with pytest.raises(DimensionError):
        step(m, 0, np.zeros(3), np.zeros(2))
    with pytest.raises(DimensionError):
        step(m, 0, np.zeros(4), np.zeros(3))


def test_model_validates_generator_output():
    m = LtvModel(2, 1, lambda k: (np.eye(3), np.zeros((3, 1))), 0.1)
    with pytest.raises(DimensionError):
        m.matrices(0)
    with pytest.raises(ValueError):
        LtvModel.lti(np.eye(2), np.zeros((2, 1)), 0.0)


def test_tabulated_model_holds_last_entry():
    As = np.stack([np.eye(2) * (i + 1) for i in range(3)])
    Bs = np.ones((3, 2, 1))
    m = LtvModel.from_table(As, Bs, 0.1)
    assert np.array_equal(m.matrices(1)[0], 2 * np.eye(2))
    assert np.array_equal(m.matrices(10)[0], 3 * np.eye(2))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
       arrays(float, 2, elements=finite), arrays(float, 2, elements=finite))
def test_step_is_linear(x1, x2, u1, u2):
    m = double_integrator(0.03)
    lhs = step(m, 0, x1 + x2, u1 + u2)
    rhs = step(m, 0, x1, u1) + step(m, 0, x2, u2) - step(m, 0, np.zeros(4), np.zeros(2))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_rollout_matches_repeated_steps(rng):
    As = np.eye(3) + 0.1 * rng.normal(size=(6, 3, 3))
    Bs = rng.normal(size=(6, 3, 2))
    m = LtvModel.from_table(As, Bs, 0.1)
    U = rng.normal(size=(5, 2))
    X = rollout(m, 1, np.ones(3), U)
    x = np.ones(3)
    for i in range(5):
        x = As[1 + i] @ x + Bs[1 + i] @ U[i]
        np.testing.assert_allclose(X[i + 1], x, rtol=1e-14)


def test_time_grid_clock():
    g = TimeGrid(167, 5.01, 4, 0.03)
    assert g.t(167) == 5.01
    np.testing.assert_allclose(g.times, 5.01 + 0.03 * np.arange(4), rtol=0, atol=1e-15)
    assert g.k_last == 170 and g.contains(170) and not g.contains(171)
    assert g.sub(168, 2).t0 == g.t(168)
    with pytest.raises(ValueError):
        TimeGrid(0, 0.0, 0, 0.1)


@pytest.mark.parametrize("x2, tol, expected", [
    ((0.0, 0.0), 1e-8, True),
    ((4.72, 0.0), 1e-8, False),
    ((1.5 * np.pi, 0.0), 1e-9, True),
])
def test_velocity_bound_feasibility(x2, tol, expected):
    cs = velocity_constraints()
    assert check_feasible(cs, [0.0, 0.0, *x2], [0.0, 0.0], tol) is expected


def test_check_feasible_without_constraints():
    assert check_feasible(no_constraints(2, 1), np.zeros(2), np.zeros(1))
    with pytest.raises(ValueError):
        check_feasible(no_constraints(2, 1), np.zeros(2), np.zeros(1), tol=-1.0)


def test_box_constraints_drop_infinite_bounds():
    cs = box_constraints(2, 1, x_lo=[-1.0, -np.inf], u_hi=2.0)
    assert cs.n_h == 2
    assert check_feasible(cs, [-1.0, -1e9], [2.0])
    assert not check_feasible(cs, [-1.1, 0.0], [0.0])


@settings(max_examples=30, deadline=None)
@given(arrays(float, 3, elements=st.floats(-10, 10)), arrays(float, 2, elements=st.floats(-10, 10)))
def test_affine_linearization_is_exact(x, u):
    Cx = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 1.0]])
    Cu = np.array([[1.0, 0.0], [2.0, -1.0]])
    cs = affine_constraints(Cx, Cu, [1.0, 2.0])
    Jx, Ju, h0 = cs.linearize(np.zeros(3), np.zeros(2))
    np.testing.assert_allclose(h0 + Jx @ x + Ju @ u, cs(x, u), atol=1e-12)


def test_robot_constraint_jacobian_second_order(rng):
    cs = robot_constraints()
    for _ in range(20):
        x = rng.uniform(-4, 4, size=4)
        v = rng.uniform(-5, 5, size=2)
        Jx, Ju, h0 = cs.linearize(x, v)
        dx, du = rng.normal(size=4), rng.normal(size=2)
        ratios = []
        for s in np.logspace(-6, -3, 4):
            pred = h0 + s * (Jx @ dx + Ju @ du)
            ratios.append(np.abs(cs(x + s * dx, v + s * du) - pred).max() / s ** 2)
        # second-order remainder: bounded ratio, roundoff allowance at the small end
        assert max(ratios[1:]) < 1e4


def test_fd_fallback_matches_analytic(rng):
    cs = robot_constraints()
    from irmpc.ltv import ConstraintSet
    fd = ConstraintSet(4, 2, 8, cs.h)
    x, v = rng.normal(size=4), rng.normal(size=2)
    Jx, Ju, _ = cs.linearize(x, v)
    Fx, Fu, _ = fd.linearize(x, v)
    np.testing.assert_allclose(Fx, Jx, atol=1e-5)
    np.testing.assert_allclose(Fu, Ju, atol=1e-5)
