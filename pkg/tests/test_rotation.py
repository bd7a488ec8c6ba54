import numpy as np
import pytest
from scipy.optimize import minimize

from irmpc.errors import ContractError, IllPosedError
from irmpc.ltv import LtvModel, TimeGrid, rollout
from irmpc.ocp import OcpProblem, OcpSolution, solve, solve_reference_ocp
from irmpc.rotation import (RotatedCost, RotationData, check_positivity, hessian_check,
                            reference_cost_offset, rotated_stage, rotated_terminal,
                            rotated_terminal_center, rotated_value_ocp, telescoping_identity_check,
                            verify_primal_invariance)
from oracles import random_problem


def rotation_for(prob):
    """Feasible reference and multipliers of a problem solved on its own horizon."""
    return RotationData.from_solution(solve(prob), prob.model)


def simple_rot(nx=2, nu=1, M=4, lam=None):
    m = LtvModel.lti(np.eye(nx), np.ones((nx, nu)), 1.0)
    g = TimeGrid(0, 0.0, M + 1, 1.0)
    U = np.zeros((M, nu))
    X = rollout(m, 0, np.zeros(nx), U)
    L = np.zeros((M + 1, nx)) if lam is None else np.asarray(lam, float)
    return RotationData(g, X, U, L, np.zeros((M, 0)), m)


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(7)
    prob = random_problem(rng, nx=3, nu=2, M=12, constraints="input", bound=0.8)
    return prob, rotation_for(prob)


def test_rotated_stage_vanishes_at_reference(small):
    prob, rot = small
    rc = RotatedCost(prob.cost, rot)
    for k in range(prob.M):
        assert abs(rotated_stage(rc, rot.x_r(k), rot.u_r(k), k)) <= 1e-12


def test_zero_multipliers_reduce_to_shifted_cost(small, rng):
    prob, rot = small
    rc = RotatedCost(prob.cost, rot.zeroed())
    for k in range(prob.M):
        t = prob.grid.t(k)
        x, u = rng.normal(size=3), rng.normal(size=2)
        expect = prob.cost.stage(x, u, k, t) - prob.cost.stage(rot.x_r(k), rot.u_r(k), k, t)
        assert rc.stage(x, u, k, t) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_stage_terms_agree_with_direct_evaluation(small, rng):
    prob, rot = small
    rc = RotatedCost(prob.cost, rot, terminal="r")
    for k in range(prob.M):
        t = prob.grid.t(k)
        H, g, c = rc.stage_terms(k, t)
        z = rng.normal(size=5)
        assert 0.5 * z @ H @ z + g @ z + c == pytest.approx(rc.stage(z[:3], z[3:], k, t), rel=1e-10, abs=1e-10)
    Hm, gm, cm = rc.terminal_terms(prob.M, prob.grid.t(prob.M))
    x = rng.normal(size=3)
    assert 0.5 * x @ Hm @ x + gm @ x + cm == pytest.approx(rc.terminal(x, prob.M, prob.grid.t(prob.M)),
                                                            rel=1e-10, abs=1e-10)


def test_rotated_terminal_center_zero_multiplier():
    rot = simple_rot()
    np.testing.assert_array_equal(rotated_terminal_center(rot, np.eye(2), 2), rot.x_r(2))


def test_rotated_terminal_center_unit_weight():
    lam = np.zeros((5, 2))
    lam[3] = [2.0, 0.0]
    rot = simple_rot(lam=lam)
    np.testing.assert_allclose(rotated_terminal_center(rot, np.eye(2), 3), rot.x_r(3) + [1.0, 0.0])


def test_rotated_terminal_center_matches_numerical_minimizer(rng):
    lam = rng.normal(size=(5, 2))
    rot = simple_rot(lam=lam)
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    xr, l = rot.x_r(2), rot.lam_r(2)
    f = lambda x: (x - xr) @ P @ (x - xr) - l @ (x - xr)
    res = minimize(f, np.zeros(2), method="BFGS", options={"gtol": 1e-12})
    np.testing.assert_allclose(rotated_terminal_center(rot, P, 2), res.x, atol=1e-6)


def test_rotated_terminal_center_singular_weight():
    with pytest.raises(IllPosedError):
        rotated_terminal_center(simple_rot(), np.zeros((2, 2)), 1)


def test_rotated_terminal_values(small, rng):
    prob, rot = small
    rc = RotatedCost(prob.cost, rot, terminal="ytilde")
    kM = prob.M
    assert rotated_terminal(rc, rot.x_r(kM), kM) == 0.0
    rr = RotatedCost(prob.cost, rot, terminal="r")
    assert abs(rotated_terminal(rr, rot.x_r(kM), kM)) <= 1e-12
    # with lam = 0 the ytilde form is p centered at x^r minus its value there
    rz = RotatedCost(prob.cost, rot.zeroed(), terminal="ytilde")
    x = rng.normal(size=3)
    d = x - rot.x_r(kM)
    assert rotated_terminal(rz, x, kM) == pytest.approx(d @ prob.cost.P @ d, rel=1e-12)


def test_telescoping_on_reference_itself(small):
    prob, rot = small
    prob0 = prob.with_x_init(rot.x_r(0))
    assert telescoping_identity_check(prob0, rot, rot.states, rot.inputs) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_telescoping_random_rollouts_random_multipliers(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, nx=3, nu=2, M=15)
    base = rotation_for(prob)
    rot = RotationData(base.grid, base.states, base.inputs, rng.normal(size=base.lam.shape),
                       base.mu, base.model)
    U = rng.normal(size=(prob.M, 2))
    X = rollout(prob.model, 0, prob.x_init, U)
    assert telescoping_identity_check(prob, rot, X, U) <= 1e-9


def test_telescoping_rejects_dynamics_violation(small, rng):
    prob, rot = small
    U = rng.normal(size=(prob.M, 2))
    X = rollout(prob.model, 0, prob.x_init, U)
    X[4] += 1e-3
    with pytest.raises(ContractError):
        telescoping_identity_check(prob, rot, X, U)


def test_primal_invariance_unconstrained_lqr(rng):
    prob = random_problem(rng, nx=3, nu=2, M=20)
    rep = verify_primal_invariance(prob, rotation_for(prob))
    assert rep.primal_deviation <= 1e-8
    assert rep.lam_bar_max <= 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_primal_invariance_constrained(seed):
    rng = np.random.default_rng(50 + seed)
    prob = random_problem(rng, nx=4, nu=2, M=30, constraints="input", bound=0.7)
    rot = rotation_for(prob)
    rep = verify_primal_invariance(prob, rot)
    assert rep.passed and rep.primal_deviation <= 1e-6
    # the rotated problem has vanishing costates and unchanged inequality multipliers
    assert rep.lam_bar_max <= 1e-6
    assert rep.mu_bar_deviation <= 1e-6


def test_scaled_multipliers_leave_primal_but_not_costates(small):
    prob, rot = small
    rep = verify_primal_invariance(prob, rot.scaled(2.0))
    assert rep.primal_deviation <= 1e-6
    assert rep.lam_bar_max > 1e-3


def test_rotated_value(small, rng):
    prob, rot = small
    assert abs(rotated_value_ocp(prob.with_x_init(rot.x_r(0)), rot)) <= 1e-9
    v = rotated_value_ocp(prob.with_x_init(rot.x_r(0) + 0.1 * rng.normal(size=3)), rot)
    assert v > 0


def test_rotated_value_is_shifted_original(small):
    prob, rot = small
    v_orig = solve(prob).objective
    v_rot = rotated_value_ocp(prob, rot)
    boundary = rot.lam_r(0) @ (prob.x_init - rot.x_r(0))
    assert v_rot == pytest.approx(v_orig - reference_cost_offset(prob, rot) + boundary, abs=1e-8)


def test_from_solution_refuses_inaccurate_multipliers(small):
    prob, rot = small
    sol = solve(prob)
    bad = OcpSolution(sol.states, sol.inputs, sol.lam, sol.mu, kkt_residual=1e-6,
                      objective=sol.objective, iterations=1, grid=sol.grid)
    with pytest.raises(ContractError):
        RotationData.from_solution(bad, prob.model)


def test_rotation_data_checks_dynamics(small):
    prob, rot = small
    X = rot.states.copy()
    X[2] += 1.0
    with pytest.raises(ContractError):
        RotationData(rot.grid, X, rot.inputs, rot.lam, rot.mu, rot.model)


def test_hessian_identity(small, rng):
    prob, rot = small
    rc = RotatedCost(prob.cost, rot)
    for k in (0, 5, 11):
        assert hessian_check(rc, k, point=rot.y_r(k) + rng.normal(size=5)) <= 1e-5


def test_positivity_small_instance(small):
    prob, rot = small
    rep = check_positivity(RotatedCost(prob.cost, rot), prob.constraints, n_samples=2000, seed=3)
    assert rep.passed and rep.violations == 0


@pytest.mark.slow
def test_positivity_on_bench(bench, rot):
    rep = check_positivity(RotatedCost(bench.cost, rot), bench.constraints, n_samples=10_000, seed=0)
    assert rep.n_samples == 10_000
    assert rep.violations == 0 and rep.min_value > 0


@pytest.mark.slow
def test_bench_truncated_invariance(bench):
    g = TimeGrid(0, 0.0, 101, bench.cfg.t_s)
    x0 = bench.reference.r_x(0.0)
    sol = solve_reference_ocp(bench.model, bench.cost, bench.constraints, bench.reference, g, x0, 100,
                              check_tail=False)
    rot = RotationData.from_solution(sol, bench.model)
    prob = OcpProblem(bench.model, bench.cost, bench.constraints, g, x0, 100)
    rep = verify_primal_invariance(prob, rot)
    assert rep.passed and rep.lam_bar_max <= 1e-6
