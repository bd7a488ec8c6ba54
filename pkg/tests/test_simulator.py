import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from irmpc.errors import ContractError
from irmpc.ltv import TimeGrid, box_constraints, rollout
from irmpc.mpc import MpcConfig, MpcController
from irmpc.ocp import QuadraticStageCost
from irmpc.reference import TabulatedReference
from irmpc.robot import double_integrator
from irmpc.rotation import RotationData
from irmpc.simulator import ClosedLoopTrace, evaluate_iss, fit_sigma, run_closed_loop, verify_decrease
from irmpc.terminal import lqr_synthesis


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(21)
    m = double_integrator(0.1)
    L = 80
    U = np.zeros((L, 2))
    U[:25] = 0.3 * rng.normal(size=(25, 2))
    X = rollout(m, 0, np.zeros(4), U)
    g = TimeGrid(0, 0.0, L + 1, 0.1)
    ref = TabulatedReference(g, X, U)
    A, B = m.matrices(0)
    P, K = lqr_synthesis(A, B, np.eye(4), 0.1 * np.eye(2))
    cost = QuadraticStageCost(np.diag([1, 1, 1, 1, 0.1, 0.1]), P, ref)
    cs = box_constraints(4, 2, u_lo=-20.0, u_hi=20.0)
    rot = RotationData(g, X, U, np.zeros_like(X), np.zeros((L, cs.n_h)), m)
    return m, ref, cost, cs, P, K, rot, X


def _run(toy, mode, x0, steps=30, hard=False, level=1.0):
    m, ref, cost, cs, P, K, rot, X = toy
    cfg = MpcConfig(m, cost, cs, P, K, level, N=5, mode=mode, hard=hard)
    return run_closed_loop(m, MpcController(cfg, rot), ref, x0, 0, steps)


def test_start_on_feasible_reference_stays_on_it(toy):
    X = toy[7]
    for mode in ("practical", "ideal"):
        tr = _run(toy, mode, X[0])
        assert tr.failure is None
        assert tr.err_r.max() <= 1e-8
        assert tr.err_yr.max() <= 1e-8


def test_trace_shapes_and_dynamics(toy):
    tr = _run(toy, "practical", toy[7][0] + 0.3)
    assert tr.steps == 30 and tr.states.shape == (31, 4) and tr.inputs.shape == (30, 2)
    assert len(tr.Vbar_i) == 31 and len(tr.Jbar_star) == 30
    assert tr.dynamics_residual(toy[0]) == 0.0


def test_decrease_from_perturbed_start(toy):
    tr = _run(toy, "ideal", toy[7][0] + np.array([0.5, -0.5, 0.2, 0.0]), steps=40)
    rep = verify_decrease(tr, "ideal")
    assert rep.passed
    assert verify_decrease(tr, "nominal").passed
    assert np.all(np.diff(tr.Vbar_i) <= 1e-9)


def test_stationary_optimum_has_zero_decrease_terms(toy):
    tr = _run(toy, "ideal", toy[7][0], steps=10)
    np.testing.assert_allclose(tr.decrease_resid, 0.0, atol=1e-9)


def test_ideal_trace_certificate_degenerates(toy):
    tr = _run(toy, "ideal", toy[7][0] + 0.4)
    cert = evaluate_iss(tr)
    assert np.all(tr.d == 0.0)
    assert cert.gaps.max() <= 1e-7
    assert cert.c1 == 0.0 and cert.c2 == 0.0


def test_deterministic_csv(toy):
    x0 = toy[7][0] + 0.2
    a = _run(toy, "practical", x0).to_csv()
    b = _run(toy, "practical", x0).to_csv()
    assert a == b
    header = a.splitlines()[0].split(",")
    assert header[:2] == ["k", "t"] and header[-7:] == [
        "err_r", "err_yr", "V", "Vbar_i", "Jbar_star", "slack", "decrease_resid"]
    assert len(a.splitlines()) == 31


def test_solver_failure_truncates_trace(toy):
    x0 = toy[7][0] + np.array([50.0, 0.0, 0.0, 0.0])
    tr = _run(toy, "practical", x0, hard=True, level=1e-6)
    assert tr.failure is not None
    assert tr.steps < 30


def test_zero_steps_gives_empty_trace(toy):
    tr = _run(toy, "practical", toy[7][0], steps=0)
    assert tr.steps == 0 and tr.states.shape == (1, 4)
    assert verify_decrease(tr).worst_step == -1
    with pytest.raises(ValueError):
        _run(toy, "practical", toy[7][0], steps=-1)


def test_iss_needs_monitor_fields(toy):
    m, ref, cost, cs, P, K, rot, X = toy
    cfg = MpcConfig(m, cost, cs, P, K, 1.0, N=5)
    tr = run_closed_loop(m, MpcController(cfg), ref, X[0] + 0.1, 0, 5)
    with pytest.raises(ContractError):
        evaluate_iss(tr)
    with pytest.raises(ContractError):
        verify_decrease(tr)


def test_fit_sigma_simple():
    d = np.array([0.0, 0.5, 1.0, 2.0])
    g = np.array([0.0, 0.5, 1.0, 4.0])
    c1, c2, ok = fit_sigma(d, g)
    assert ok and c1 >= 0 and c2 >= 0
    assert np.all(c1 * d + c2 * d ** 2 >= g - 1e-7 - 1e-12)
    assert fit_sigma(np.zeros(3), np.full(3, 1e-8)) == (0.0, 0.0, True)
    assert fit_sigma(np.array([0.0, 1.0]), np.array([1.0, 0.0]))[2] is False


@settings(max_examples=40, deadline=None)
@given(arrays(float, 12, elements=st.one_of(st.just(0.0), st.floats(1e-3, 5))), arrays(float, 12, elements=st.floats(-1, 10)))
def test_fit_sigma_covers_when_positive_gaps_have_positive_d(d, g):
    g = np.where(d > 0, g, np.minimum(g, 0.0))
    c1, c2, ok = fit_sigma(d, g)
    assert ok
    assert np.all(c1 * d + c2 * d * d >= g - 1e-7 - 1e-9 * np.maximum(1.0, np.abs(g)))


def _empty_like(n):
    z = np.zeros(n)
    return ClosedLoopTrace("ideal", np.arange(n), z, np.zeros((n + 1, 1)), np.zeros((n, 1)), z, z,
                           np.zeros(n + 1), z, z, z, z, z, z, z)


def test_decrease_report_mode_check():
    with pytest.raises(ValueError):
        verify_decrease(_empty_like(3), mode="other")


@pytest.mark.slow
def test_bench_ideal_trace(ideal_trace):
    assert ideal_trace.failure is None and ideal_trace.steps == 500
    assert verify_decrease(ideal_trace, "ideal").passed
    assert ideal_trace.err_yr[-1] <= 1e-3
    assert np.all(ideal_trace.slack <= 1e-7)
    # value sandwich, lower side
    e2 = ideal_trace.err_yr ** 2
    assert np.all(ideal_trace.Vbar_i[:-1] >= ideal_trace.lambda_min_W * e2 - 1e-8)


@pytest.mark.slow
def test_bench_practical_iss(practical_trace):
    cert = evaluate_iss(practical_trace)
    assert cert.iss_ok and cert.iss_slack_max <= 1e-6
    assert cert.covers and cert.monotone
    # decrease violations near the jump stay under the fitted envelope
    bound = cert.sigma_hat(practical_trace.d) + 1e-6
    assert np.all(practical_trace.decrease_resid <= bound)


@pytest.mark.slow
def test_feasible_reference_gaps_collapse(feasible_trace):
    cert = evaluate_iss(feasible_trace)
    assert cert.d.max() <= 1e-7
    assert cert.gaps.max() <= 1e-7
    assert verify_decrease(feasible_trace, "nominal").passed
