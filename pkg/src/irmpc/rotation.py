"""Cost rotation with OCP multipliers.

Given a dynamically feasible reference y^r = (x^r, u^r) with multipliers lam^r,

    qbar(x, u, k) = q(x, u) - q(y^r_k) + lam_k'(x - x^r_k) - lam_{k+1}'(f_k(x, u) - f_k(y^r_k))

and the rotated terminal costs add ``lam_k'(x - x^r_k)`` to a terminal cost shifted
to vanish at x^r_k. On any trajectory that satisfies the dynamics the rotated and
original totals differ by a constant plus ``lam_0'(xi_0 - x^r_0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import ContractError, IllPosedError
from .ltv import ConstraintSet, LtvModel, TimeGrid
from .ocp import (KKT_TOL, OcpProblem, OcpSolution, QuadraticCost, QuadraticStageCost,
                  solve)

DYNAMICS_TOL = 1e-8


@dataclass(frozen=True)
class RotationData:
    """Feasible reference and its multipliers, indexed by absolute step k."""

    grid: TimeGrid
    states: np.ndarray
    inputs: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    model: LtvModel
    source_kkt_residual: float = 0.0

    def __post_init__(self):
        L = len(self.inputs)
        if self.states.shape[0] != L + 1 or self.lam.shape != self.states.shape:
            raise ContractError("rotation data: states, inputs and multipliers disagree in length")
        if self.grid.length != L + 1:
            raise ContractError("rotation data: grid length does not match the trajectory")
        for i in range(L):
            k = self.grid.k0 + i
            gap = np.abs(self.states[i + 1] - self.model.f(k, self.states[i], self.inputs[i])).max()
            if gap > DYNAMICS_TOL:
                raise ContractError(f"reference violates the dynamics at step {k} by {gap:.3e}")

    @classmethod
    def from_solution(cls, sol: OcpSolution, model: LtvModel, max_kkt: float = KKT_TOL):
        if not sol.kkt_residual <= max_kkt:
            raise ContractError(f"solution KKT residual {sol.kkt_residual:.3e} exceeds {max_kkt:.0e}; "
                                "multipliers are too inaccurate for rotation")
        return cls(sol.grid, sol.states, sol.inputs, sol.lam, sol.mu, model,
                   source_kkt_residual=sol.kkt_residual)

    def _i(self, k) -> int:
        i = int(k) - self.grid.k0
        if not 0 <= i < len(self.states):
            raise IndexError(f"step {k} outside the rotation grid [{self.grid.k0}, {self.grid.k_last}]")
        return i

    def x_r(self, k):
        return self.states[self._i(k)]

    def u_r(self, k):
        i = self._i(k)
        if i >= len(self.inputs):
            raise IndexError(f"no reference input at the last step {k}")
        return self.inputs[i]

    def lam_r(self, k):
        return self.lam[self._i(k)]

    def mu_r(self, k):
        return self.mu[self._i(k)]

    def y_r(self, k):
        return np.concatenate([self.x_r(k), self.u_r(k)])

    def scaled(self, factor: float) -> "RotationData":
        """Same reference with multipliers scaled (used to exercise failing checks)."""
        return RotationData(self.grid, self.states, self.inputs, factor * self.lam,
                            factor * self.mu, self.model, self.source_kkt_residual)

    def zeroed(self) -> "RotationData":
        return self.scaled(0.0)


def rotated_terminal_center(rot: RotationData, P, k) -> np.ndarray:
    """ytilde_k = argmin_x ||x - x^r_k||_P^2 - lam_k'(x - x^r_k) = x^r_k + P^{-1} lam_k / 2."""
    try:
        cf = cho_factor(np.asarray(P, dtype=float))
    except LinAlgError as exc:
        raise IllPosedError("terminal weight is not positive definite") from exc
    return rot.x_r(k) + 0.5 * cho_solve(cf, rot.lam_r(k))


class RotatedCost(QuadraticCost):
    """Rotated stage cost plus one of the two rotated terminal costs.

    ``terminal='ytilde'`` gives ``p_ytilde(x) - p_ytilde(x^r) + lam'(x - x^r)``, which
    equals ``||x - x^r||_P^2``; ``terminal='r'`` rotates the practical terminal
    cost centered at r_x(t).
    """

    def __init__(self, base: QuadraticStageCost, rot: RotationData, terminal: str = "ytilde"):
        if terminal not in ("ytilde", "r"):
            raise ValueError("terminal must be 'ytilde' or 'r'")
        self.base, self.rot, self.terminal_kind = base, rot, terminal
        self.model = rot.model
        self.n_x, self.n_u = base.n_x, base.n_u
        self.W, self.P = base.W, base.P

    def with_terminal(self, terminal: str) -> "RotatedCost":
        return RotatedCost(self.base, self.rot, terminal)

    def _linear_terms(self, k):
        """Gradient of the rotation terms with respect to (x, u)."""
        A, B = self.model.matrices(k)
        lk, lk1 = self.rot.lam_r(k), self.rot.lam_r(k + 1)
        return np.concatenate([lk - A.T @ lk1, -B.T @ lk1])

    def stage(self, x, u, k, t):
        z = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        yr = self.rot.y_r(k)
        d = z - yr
        # q(z) - q(y^r) expanded around y^r so the value is exactly 0 there
        off = yr - self.base.stage_ref(t)
        W = self.base.W
        quad = np.einsum("...i,ij,...j->...", d, W, d) + 2.0 * d @ (W @ off)
        return quad + d @ self._linear_terms(k)

    def stage_terms(self, k, t):
        H, g, _ = self.base.stage_terms(k, t)
        g = g + self._linear_terms(k)
        zr = self.rot.y_r(k)
        c = -(0.5 * zr @ H @ zr + g @ zr)
        return H, g, float(c)

    def _terminal_center(self, k, t):
        if self.terminal_kind == "ytilde":
            return rotated_terminal_center(self.rot, self.P, k)
        return self.base.reference.r_x(t)

    def terminal(self, x, k, t):
        d = np.asarray(x, float) - self.rot.x_r(k)
        if self.terminal_kind == "ytilde":
            return np.einsum("...i,ij,...j->...", d, self.P, d)
        off = self.rot.x_r(k) - self.base.reference.r_x(t)
        return (np.einsum("...i,ij,...j->...", d, self.P, d) + 2.0 * d @ (self.P @ off)
                + d @ self.rot.lam_r(k))

    def terminal_terms(self, k, t):
        c0 = self._terminal_center(k, t)
        H = 2.0 * self.P
        g = -2.0 * self.P @ c0 + self.rot.lam_r(k)
        xr = self.rot.x_r(k)
        c = -(0.5 * xr @ H @ xr + g @ xr)
        return H, g, float(c)


def ideal_cost(base: QuadraticStageCost, rot: RotationData) -> QuadraticStageCost:
    """Unrotated stage cost with the terminal cost centered at ytilde^r."""
    return base.with_terminal_center(lambda k, t: rotated_terminal_center(rot, base.P, k))


def rotated_stage(rc: RotatedCost, x, u, k, t=None):
    t = rc.rot.grid.t(k) if t is None else t
    return rc.stage(x, u, k, t)


def rotated_terminal(rc: RotatedCost, x, k, t=None):
    t = rc.rot.grid.t(k) if t is None else t
    return rc.terminal(x, k, t)


def _check_dynamics(model, k0, states, inputs):
    for i in range(len(inputs)):
        gap = np.abs(states[i + 1] - model.f(k0 + i, states[i], inputs[i])).max()
        if gap > DYNAMICS_TOL:
            raise ContractError(f"trajectory violates the dynamics at step {k0 + i} by {gap:.3e}")


def telescoping_identity_check(prob: OcpProblem, rot: RotationData, states, inputs) -> float:
    """|rotated total - original total - lam_0'(xi_0 - x^r_0) + reference offset|.

    Both totals use the practical terminal cost (the rotated one being p̄_r).
    The identity holds on any dynamically feasible trajectory, for any multipliers.
    """
    states = np.asarray(states, float)
    inputs = np.asarray(inputs, float)
    if len(inputs) != prob.M or len(states) != prob.M + 1:
        raise ContractError("trajectory length does not match the horizon")
    _check_dynamics(prob.model, prob.grid.k0, states, inputs)
    base = prob.cost
    rc = RotatedCost(base, rot, terminal="r")
    ks, ts = prob.grid.steps, prob.grid.times
    rotated = sum(float(rc.stage(states[n], inputs[n], ks[n], ts[n])) for n in range(prob.M))
    rotated += float(rc.terminal(states[-1], ks[-1], ts[-1]))
    original = sum(float(base.stage(states[n], inputs[n], ks[n], ts[n])) for n in range(prob.M))
    original += float(base.terminal(states[-1], ks[-1], ts[-1]))
    offset = sum(float(base.stage(rot.x_r(k), rot.u_r(k), k, t)) for k, t in zip(ks[:-1], ts[:-1]))
    offset += float(base.terminal(rot.x_r(ks[-1]), ks[-1], ts[-1]))
    boundary = float(rot.lam_r(ks[0]) @ (states[0] - rot.x_r(ks[0])))
    return abs(rotated - original - boundary + offset)


@dataclass
class InvarianceReport:
    primal_deviation: float
    lam_bar_max: float
    mu_bar_deviation: float
    passed: bool
    original: OcpSolution
    rotated: OcpSolution


def verify_primal_invariance(prob: OcpProblem, rot: RotationData, tol: float = 1e-6,
                             **solve_kw) -> InvarianceReport:
    """Solve with the original and the rotated (p̄_r) costs and compare primals.

    ``lam_bar_max`` and ``mu_bar_deviation`` are only expected to vanish when
    ``rot`` was computed from ``prob`` itself.
    """
    if not isinstance(prob.cost, QuadraticStageCost):
        raise ContractError("primal invariance needs the unrotated tracking cost")
    orig = solve(prob, **solve_kw)
    rotd = solve(prob.with_cost(RotatedCost(prob.cost, rot, terminal="r")), **solve_kw)
    dev = max(np.abs(orig.states - rotd.states).max(), np.abs(orig.inputs - rotd.inputs).max())
    i0 = prob.grid.k0 - rot.grid.k0
    n = prob.M
    lam_bar = float(np.abs(rotd.lam[1:]).max())
    mu_dev = float(np.abs(rotd.mu - rot.mu[i0:i0 + n]).max(initial=0.0)) if rotd.mu.size else 0.0
    return InvarianceReport(float(dev), lam_bar, mu_dev, bool(dev <= tol), orig, rotd)


def rotated_value_ocp(prob: OcpProblem, rot: RotationData, **solve_kw) -> float:
    """Optimal value of the OCP with rotated stage and terminal (p̄_r) costs."""
    return solve(prob.with_cost(RotatedCost(prob.cost, rot, terminal="r")), **solve_kw).objective


def reference_cost_offset(prob: OcpProblem, rot: RotationData) -> float:
    """Original cost of the feasible reference over the problem's horizon."""
    ks, ts = prob.grid.steps, prob.grid.times
    val = sum(float(prob.cost.stage(rot.x_r(k), rot.u_r(k), k, t)) for k, t in zip(ks[:-1], ts[:-1]))
    return val + float(prob.cost.terminal(rot.x_r(ks[-1]), ks[-1], ts[-1]))


@dataclass
class PositivityReport:
    n_samples: int
    min_value: float
    min_margin: float
    violations: int
    passed: bool


def sample_feasible_deviations(rot: RotationData, constraints: ConstraintSet, n_samples: int,
                               rng: np.random.Generator, radius: float = 10.0,
                               steps=None, max_tries: int = 50):
    """Feasible (k, x, u) samples around y^r with ||(x, u) - y^r_k|| in [1e-3, radius].

    Directions are uniform on the sphere and radii log-uniform, so both the
    near-reference and the far region are exercised.
    """
    nx, nu = rot.states.shape[1], rot.inputs.shape[1]
    ks_avail = np.arange(rot.grid.k0, rot.grid.k0 + len(rot.inputs)) if steps is None else np.asarray(steps)
    ks, X, U = [], [], []
    need = n_samples
    for _ in range(max_tries):
        m = 4 * need
        kk = rng.choice(ks_avail, size=m)
        d = rng.normal(size=(m, nx + nu))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d *= np.exp(rng.uniform(np.log(1e-3), np.log(radius), size=(m, 1)))
        Y = np.stack([rot.y_r(k) for k in kk]) + d
        h = constraints(Y[:, :nx], Y[:, nx:])
        ok = np.all(h <= 0.0, axis=1) if h.size else np.ones(m, bool)
        sel = np.flatnonzero(ok)[:need]
        ks.append(kk[sel])
        X.append(Y[sel, :nx])
        U.append(Y[sel, nx:])
        need -= len(sel)
        if need == 0:
            break
    if need > 0:
        raise ContractError("could not draw enough feasible samples around the reference")
    return np.concatenate(ks), np.concatenate(X), np.concatenate(U)


def check_positivity(rc: RotatedCost, constraints: ConstraintSet, n_samples: int = 10_000,
                     seed: int = 0, radius: float = 10.0) -> PositivityReport:
    """qbar on feasible samples against the margin lambda_min(W) d^2 (1 - 1e-6)."""
    rng = np.random.default_rng(seed)
    ks, X, U = sample_feasible_deviations(rc.rot, constraints, n_samples, rng, radius)
    lmin = float(np.linalg.eigvalsh(rc.W).min())
    vals = np.empty(len(ks))
    margins = np.empty(len(ks))
    grid = rc.rot.grid
    for k in np.unique(ks):
        idx = np.flatnonzero(ks == k)
        vals[idx] = rc.stage(X[idx], U[idx], k, grid.t(k))
        d2 = np.sum((np.concatenate([X[idx], U[idx]], axis=1) - rc.rot.y_r(k)) ** 2, axis=1)
        margins[idx] = vals[idx] - lmin * d2 * (1.0 - 1e-6)
    viol = int(np.sum(margins < 0.0))
    return PositivityReport(len(ks), float(vals.min()), float(margins.min()), viol, viol == 0)


def hessian_check(rc: RotatedCost, k, point=None, h: float = 1e-3) -> float:
    """max |FD Hessian of qbar - 2W| at a point (defaults to y^r_k)."""
    t = rc.rot.grid.t(k)
    nx = rc.n_x
    z0 = rc.rot.y_r(k) if point is None else np.asarray(point, float)
    n = z0.size

    def f(z):
        return float(rc.stage(z[:nx], z[nx:], k, t))

    Hfd = np.empty((n, n))
    E = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            Hfd[i, j] = (f(z0 + E[i] + E[j]) - f(z0 + E[i] - E[j])
                         - f(z0 - E[i] + E[j]) + f(z0 - E[i] - E[j])) / (4 * h * h)
    return float(np.abs(Hfd - 2.0 * rc.W).max())
