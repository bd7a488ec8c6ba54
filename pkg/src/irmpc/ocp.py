"""Finite-horizon LTV optimal control: costs, problem assembly, QP and SQP solves.

Multipliers follow the Lagrangian

    L = sum q(xi_n, nu_n) + p(xi_M) + lam_0'(xi_0 - x_init)
        + sum lam_{n+1}'(xi_{n+1} - f_n(xi_n, nu_n)) + sum mu_n' h(xi_n, nu_n)

so that ``lam_M = -grad p(xi_M)`` and the optimal value moves by ``-lam_0' delta``
when the initial state moves by ``delta``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (ContractError, ConvergenceError, DimensionError, IllPosedError)
from .ltv import ConstraintSet, LtvModel, TimeGrid, rollout
from .qp import StructuredQP, TerminalEllipsoid, solve_structured_qp
from .reference import ReferenceTrajectory, infeasibility_profile

log = logging.getLogger(__name__)

KKT_TOL = 1e-8
WEAK_ACTIVE_TOL = 1e-9
PD_TOL = 1e-12


def _require_spd(name, S):
    S = np.array(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {S.shape}")
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise IllPosedError(f"{name} is not symmetric")
    S = 0.5 * (S + S.T)
    lo = np.linalg.eigvalsh(S).min()
    if lo <= PD_TOL:
        raise IllPosedError(f"{name} is not positive definite (min eigenvalue {lo:.3e})")
    S.setflags(write=False)
    return S


class QuadraticCost:
    """Stage/terminal costs that are quadratic in (x, u) at each step.

    Subclasses provide ``stage_terms(k, t) -> (H, g, c)`` and
    ``terminal_terms(k, t) -> (H, g, c)`` meaning ``1/2 z'Hz + g'z + c``.
    """

    n_x: int
    n_u: int

    def stage_terms(self, k, t):
        raise NotImplementedError

    def terminal_terms(self, k, t):
        raise NotImplementedError

    def stage(self, x, u, k, t):
        H, g, c = self.stage_terms(k, t)
        z = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        return 0.5 * np.einsum("...i,ij,...j->...", z, H, z) + z @ g + c

    def terminal(self, x, k, t):
        H, g, c = self.terminal_terms(k, t)
        x = np.asarray(x, float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, H, x) + x @ g + c


class QuadraticStageCost(QuadraticCost):
    """q(x,u,t) = ||(x,u) - r(t)||_W^2 and p(x,t) = ||x - center(t)||_P^2.

    The terminal center defaults to r_x(t); ``terminal_center(k, t)`` overrides it
    (the ideal formulation centers the terminal cost elsewhere).
    """

    def __init__(self, W, P, reference: ReferenceTrajectory,
                 terminal_center: Optional[Callable] = None):
        self.W = _require_spd("W", W)
        self.P = _require_spd("P", P)
        self.reference = reference
        self.n_x = self.P.shape[0]
        self.n_u = self.W.shape[0] - self.n_x
        if self.n_u < 0 or reference.n_x != self.n_x or reference.n_u != self.n_u:
            raise DimensionError("W, P and the reference disagree on dimensions")
        self.terminal_center = terminal_center

    def with_terminal_center(self, center: Callable) -> "QuadraticStageCost":
        return QuadraticStageCost(self.W, self.P, self.reference, terminal_center=center)

    def stage_ref(self, t):
        return np.concatenate([self.reference.r_x(t), self.reference.r_u(t)])

    def terminal_ref(self, k, t):
        if self.terminal_center is not None:
            return np.asarray(self.terminal_center(k, t), dtype=float)
        return self.reference.r_x(t)

    def stage_terms(self, k, t):
        r = self.stage_ref(t)
        Wr = self.W @ r
        return 2.0 * self.W, -2.0 * Wr, float(r @ Wr)

    def terminal_terms(self, k, t):
        r = self.terminal_ref(k, t)
        Pr = self.P @ r
        return 2.0 * self.P, -2.0 * Pr, float(r @ Pr)

    def stage(self, x, u, k, t):
        d = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1) \
            - self.stage_ref(t)
        return np.einsum("...i,ij,...j->...", d, self.W, d)

    def terminal(self, x, k, t):
        d = np.asarray(x, float) - self.terminal_ref(k, t)
        return np.einsum("...i,ij,...j->...", d, self.P, d)


@dataclass(frozen=True)
class TerminalMode:
    """How the last state is treated.

    kind: ``cost`` (terminal cost only), ``ellipsoid`` (hard set
    ``(x - center)' matrix (x - center) <= level``) or ``penalty`` (the same set
    relaxed with an l1 penalty ``weight * max(0, violation)``).
    """

    kind: str = "cost"
    level: float = 0.0
    center: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cost", "ellipsoid", "penalty"):
            raise ValueError(f"unknown terminal mode {self.kind!r}")
        if self.kind != "cost":
            if self.center is None or self.matrix is None:
                raise ValueError("terminal set needs a center and a matrix")
            if self.level < 0:
                raise ValueError("terminal level must be nonnegative")
        if self.kind == "penalty" and self.weight <= 0:
            raise ValueError("penalty weight must be positive")

    def ellipsoid(self) -> Optional[TerminalEllipsoid]:
        if self.kind == "cost":
            return None
        return TerminalEllipsoid(np.asarray(self.matrix, float), np.asarray(self.center, float),
                                 float(self.level),
                                 penalty=self.weight if self.kind == "penalty" else None)

    def violation(self, x) -> float:
        if self.kind == "cost":
            return 0.0
        return max(self.ellipsoid().value(x), 0.0)


@dataclass
class OcpProblem:
    model: LtvModel
    cost: QuadraticCost
    constraints: ConstraintSet
    grid: TimeGrid
    x_init: np.ndarray
    M: int
    terminal: TerminalMode = field(default_factory=TerminalMode)

    def __post_init__(self):
        self.x_init = np.asarray(self.x_init, dtype=float)
        if self.M < 1:
            raise ValueError("horizon M must be at least 1")
        if self.x_init.shape != (self.model.n_x,):
            raise DimensionError(f"x_init has shape {self.x_init.shape}, expected ({self.model.n_x},)")
        if self.grid.length != self.M + 1:
            raise DimensionError(f"grid has {self.grid.length} points, horizon needs {self.M + 1}")
        if (self.constraints.n_x, self.constraints.n_u) != (self.model.n_x, self.model.n_u):
            raise DimensionError("constraint set and model disagree on dimensions")

    @property
    def steps(self):
        return self.grid.steps

    def with_cost(self, cost) -> "OcpProblem":
        return replace(self, cost=cost)

    def with_x_init(self, x) -> "OcpProblem":
        return replace(self, x_init=np.asarray(x, dtype=float))

    def objective(self, states, inputs, slack: float = 0.0) -> float:
        ks, ts = self.grid.steps, self.grid.times
        val = sum(float(self.cost.stage(states[n], inputs[n], ks[n], ts[n])) for n in range(self.M))
        val += float(self.cost.terminal(states[-1], ks[-1], ts[-1]))
        if self.terminal.kind == "penalty":
            val += self.terminal.weight * slack
        return val


@dataclass
class OcpSolution:
    states: np.ndarray
    inputs: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    kkt_residual: float
    objective: float
    iterations: int
    grid: TimeGrid
    mu_terminal: float = 0.0
    terminal_slack: float = 0.0
    nonlinear_residual: float = 0.0
    residuals: dict = field(default_factory=dict)
    # rows reported active, weakly active ones included
    active: Optional[np.ndarray] = None


def _linearize_all(cs: ConstraintSet, states, inputs):
    M = len(inputs)
    Jx = np.empty((M, cs.n_h, cs.n_x))
    Ju = np.empty((M, cs.n_h, cs.n_u))
    h = np.empty((M, cs.n_h))
    for n in range(M):
        Jx[n], Ju[n], h[n] = cs.linearize(states[n], inputs[n])
    return Jx, Ju, h


def kkt_residuals(prob: OcpProblem, states, inputs, lam, mu, mu_terminal=0.0, slack=0.0):
    """KKT residual components of the (nonlinear) OCP at a primal-dual point.

    Derivatives are rebuilt from the cost terms, the model and the constraint
    Jacobians, so the check does not rely on any solver internals.
    """
    model, M, nx = prob.model, prob.M, prob.model.n_x
    ks, ts = prob.grid.steps, prob.grid.times
    Jx, Ju, h = _linearize_all(prob.constraints, states, inputs)
    stat = 0.0
    dyn = float(np.abs(states[0] - prob.x_init).max())
    for n in range(M):
        A, B = model.matrices(ks[n])
        H, g, _ = prob.cost.stage_terms(ks[n], ts[n])
        z = np.concatenate([states[n], inputs[n]])
        gz = H @ z + g
        rx = gz[:nx] + lam[n] - A.T @ lam[n + 1] + Jx[n].T @ mu[n]
        ru = gz[nx:] - B.T @ lam[n + 1] + Ju[n].T @ mu[n]
        stat = max(stat, np.abs(rx).max(), np.abs(ru).max(initial=0.0))
        dyn = max(dyn, float(np.abs(states[n + 1] - A @ states[n] - B @ inputs[n]).max()))
    HM, gM, _ = prob.cost.terminal_terms(ks[-1], ts[-1])
    rM = HM @ states[-1] + gM + lam[-1]
    term = prob.terminal
    primal_t = dual_t = comp_t = 0.0
    if term.kind != "cost":
        ell = term.ellipsoid()
        cq = ell.value(states[-1])
        rM = rM + mu_terminal * 2.0 * ell.P @ (states[-1] - ell.center)
        dual_t = max(-mu_terminal, 0.0)
        if term.kind == "penalty":
            # s >= 0, cq <= s, multiplier of s >= 0 equals weight - mu_terminal
            mu_s = term.weight - mu_terminal
            primal_t = max(cq - slack, -slack, 0.0)
            dual_t = max(dual_t, -mu_s, 0.0)
            comp_t = max(abs(mu_terminal * (cq - slack)), abs(mu_s * slack))
        else:
            primal_t = max(cq, 0.0)
            comp_t = abs(mu_terminal * cq)
    stat = max(stat, float(np.abs(rM).max()))
    res = {
        "stationarity": float(stat),
        "dynamics": float(dyn),
        "primal": float(max(np.max(h, initial=0.0), 0.0) if h.size else 0.0),
        "dual": float(max(-np.min(mu, initial=0.0), 0.0) if mu.size else 0.0),
        "complementarity": float(np.abs(mu * h).max(initial=0.0) if mu.size else 0.0),
    }
    res["primal"] = max(res["primal"], primal_t)
    res["dual"] = max(res["dual"], dual_t)
    res["complementarity"] = max(res["complementarity"], comp_t)
    return res, h


def _assemble(prob: OcpProblem, states, inputs) -> StructuredQP:
    """Stage-structured QP with h linearized at (states, inputs)."""
    model, M = prob.model, prob.M
    nx, nu = model.n_x, model.n_u
    nz = nx + nu
    ks, ts = prob.grid.steps, prob.grid.times
    A = np.empty((M, nx, nx))
    B = np.empty((M, nx, nu))
    H = np.empty((M, nz, nz))
    g = np.empty((M, nz))
    c = np.empty(M)
    for n in range(M):
        A[n], B[n] = model.matrices(ks[n])
        H[n], g[n], c[n] = prob.cost.stage_terms(ks[n], ts[n])
    HM, gM, cM = prob.cost.terminal_terms(ks[-1], ts[-1])
    Jx, Ju, h0 = _linearize_all(prob.constraints, states, inputs)
    D = np.concatenate([Jx, Ju], axis=2)
    e = h0 - np.einsum("nij,nj->ni", Jx, states[:-1]) - np.einsum("nij,nj->ni", Ju, inputs)
    return StructuredQP(A=A, B=B, b=np.zeros((M, nx)), H=H, g=g, c=c, HM=HM, gM=gM, cM=cM,
                        D=D, e=e, x_init=prob.x_init, terminal=prob.terminal.ellipsoid())


def _package(prob, X, U, lam, mu, mu_q, slack, iterations, nl_res=None) -> OcpSolution:
    slack = float(slack) if prob.terminal.kind == "penalty" else 0.0
    res, h = kkt_residuals(prob, X, U, lam, mu, mu_q, slack)
    sol = OcpSolution(states=X, inputs=U, lam=lam, mu=mu,
                      kkt_residual=max(res.values()),
                      objective=prob.objective(X, U, slack), iterations=iterations,
                      grid=prob.grid, mu_terminal=float(mu_q), terminal_slack=slack,
                      nonlinear_residual=res["primal"] if nl_res is None else nl_res,
                      residuals=res,
                      active=(h >= -WEAK_ACTIVE_TOL) | (mu > WEAK_ACTIVE_TOL))
    return sol


def solve_qp(prob: OcpProblem, guess_inputs=None) -> OcpSolution:
    """Interior-point solve of an OCP whose constraints are affine."""
    if not prob.constraints.affine:
        raise ContractError("solve_qp needs affine constraints; use solve_sqp")
    U0 = np.zeros((prob.M, prob.model.n_u)) if guess_inputs is None else np.asarray(guess_inputs)
    X0 = rollout(prob.model, prob.grid.k0, prob.x_init, U0)
    r = solve_structured_qp(_assemble(prob, X0, U0), U_guess=U0)
    return _package(prob, r.X, r.U, r.lam, r.mu, r.mu_terminal, r.slack, r.iterations)


def _merit(prob, X, U, nu_pen):
    h = np.asarray(prob.constraints(X[:-1], U))
    viol = float(np.maximum(h, 0.0).sum()) if h.size else 0.0
    tv = prob.terminal.violation(X[-1])
    slack = tv if prob.terminal.kind == "penalty" else 0.0
    extra = nu_pen * tv if prob.terminal.kind == "ellipsoid" else 0.0
    return prob.objective(X, U, slack) + nu_pen * viol + extra, viol


def solve_sqp(prob: OcpProblem, max_iter: int = 50, tol: float = KKT_TOL,
              guess_inputs=None) -> OcpSolution:
    """SQP on the nonlinear constraints with an l1 merit backtracking line search.

    Stops once the nonlinear constraint violation is within ``tol`` and either the
    step or the OCP's own KKT residual is within ``tol``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    M, nx, nh = prob.M, prob.model.n_x, prob.constraints.n_h
    U = np.zeros((M, prob.model.n_u)) if guess_inputs is None else np.array(guess_inputs, float)
    X = rollout(prob.model, prob.grid.k0, prob.x_init, U)
    lam = np.zeros((M + 1, nx))
    mu = np.zeros((M, nh))
    mu_q = slack = 0.0
    nu_pen = 1.0
    best = None
    for it in range(1, max_iter + 1):
        r = solve_structured_qp(_assemble(prob, X, U), U_guess=U)
        dX, dU = r.X - X, r.U - U
        nu_pen = max(nu_pen, 1.5 * max(np.abs(r.mu).max(initial=0.0), abs(r.mu_terminal)))
        phi0, _ = _merit(prob, X, U, nu_pen)
        a = 1.0
        if not prob.constraints.affine:
            for _ in range(30):
                phi, _ = _merit(prob, X + a * dX, U + a * dU, nu_pen)
                if phi <= phi0 + 1e-12 * max(1.0, abs(phi0)):
                    break
                a *= 0.5
        X, U = X + a * dX, U + a * dU
        lam = lam + a * (r.lam - lam)
        mu = mu + a * (r.mu - mu)
        mu_q += a * (r.mu_terminal - mu_q)
        slack += a * (r.slack - slack)
        if prob.terminal.kind == "penalty":
            slack = max(prob.terminal.violation(X[-1]), 0.0) if a < 1.0 else slack
        step = a * max(np.abs(dX).max(), np.abs(dU).max(initial=0.0))
        sol = _package(prob, X, U, lam, mu, mu_q, slack, it)
        if best is None or sol.kkt_residual < best.kkt_residual:
            best = sol
        log.debug("sqp it %d: step %.3e kkt %.3e viol %.3e alpha %.3g",
                  it, step, sol.kkt_residual, sol.nonlinear_residual, a)
        if sol.nonlinear_residual <= tol and (step <= tol or sol.kkt_residual <= tol):
            return sol
    raise ConvergenceError(f"SQP did not converge in {max_iter} iterations "
                           f"(best KKT residual {best.kkt_residual:.3e})", best=best)


def solve(prob: OcpProblem, **kw) -> OcpSolution:
    """Dispatch to solve_qp for affine constraints and solve_sqp otherwise."""
    if prob.constraints.affine:
        return solve_qp(prob, guess_inputs=kw.get("guess_inputs"))
    return solve_sqp(prob, **kw)


def solve_reference_ocp(model: LtvModel, cost: QuadraticStageCost, constraints: ConstraintSet,
                        ref: ReferenceTrajectory, grid: TimeGrid, x_init, M: int,
                        check_tail: bool = True, tail_fraction: float = 0.1,
                        **kw) -> OcpSolution:
    """Long-horizon approximation of the infinite-horizon OCP tracking ``ref``.

    The returned trajectory is the dynamically feasible reference y^r and its
    multipliers. With ``check_tail`` the reference must be consistent with the
    dynamics over the last ``tail_fraction`` of the horizon, so that truncating
    at M does not bias the solution.
    """
    if cost.reference is not ref:
        raise ContractError("cost must track the given reference")
    g = TimeGrid(grid.k0, grid.t0, M + 1, grid.t_s)
    if check_tail:
        eps = infeasibility_profile(ref, model, g)
        n_tail = max(1, int(np.ceil(tail_fraction * M)))
        worst = float(eps[-n_tail:].max())
        if worst > KKT_TOL:
            raise ContractError(f"reference is not stationary over the last {n_tail} steps "
                                f"(max infeasibility {worst:.3e}); increase M")
    prob = OcpProblem(model, cost, constraints, g, x_init, M)
    if kw.get("guess_inputs") is None:
        kw["guess_inputs"] = np.array([ref.r_u(t) for t in g.times[:-1]])
    return solve(prob, **kw)
