"""Receding-horizon controllers: practical, ideal and rotated ideal tracking MPC.

practical   stage cost q_r, terminal cost p_r, terminal set centered at r_x(t_{k+N})
ideal       stage cost q_r, terminal cost centered at ytilde^r, set centered at x^r_{k+N}
rotated     rotated stage cost, rotated terminal cost ||x - x^r||_P^2, set at x^r_{k+N}

The terminal set is always compiled as an exact l1 penalty unless ``hard`` is set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, InfeasibleProblemError
from .ltv import ConstraintSet, LtvModel, TimeGrid, check_feasible, rollout
from .ocp import OcpProblem, QuadraticStageCost, TerminalMode, solve
from .rotation import RotatedCost, RotationData, ideal_cost

log = logging.getLogger(__name__)

MODES = ("practical", "ideal", "rotated")
PENALTY_FACTOR = 1e4
SLACK_SNAP = 1e-9


@dataclass(frozen=True)
class MpcConfig:
    model: LtvModel
    cost: QuadraticStageCost
    constraints: ConstraintSet
    P: np.ndarray
    K: np.ndarray
    level: float
    N: int
    mode: str = "practical"
    penalty_weight: Optional[float] = None
    hard: bool = False
    t0: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.level <= 0:
            raise ValueError("terminal level must be positive")
        if self.penalty_weight is not None and self.penalty_weight <= 0:
            raise ValueError("penalty weight must be positive")

    @property
    def t_s(self):
        return self.model.t_s

    def t(self, k):
        return self.t0 + k * self.model.t_s

    def with_mode(self, mode) -> "MpcConfig":
        return replace(self, mode=mode)

    @classmethod
    def for_bench(cls, bench, mode, **kw):
        return cls(bench.model, bench.cost, bench.constraints, bench.P, bench.K,
                   bench.cfg.terminal_level, bench.cfg.N, mode=mode, **kw)


@dataclass
class MpcStepResult:
    u_apply: np.ndarray
    predicted_states: np.ndarray
    predicted_inputs: np.ndarray
    value: float
    rotated_value: Optional[float]
    terminal_slack: float
    solver_stats: dict = field(default_factory=dict)


def relax_terminal(prob: OcpProblem, penalty_weight: float) -> OcpProblem:
    """Swap a hard terminal ellipsoid for its exact l1 penalty relaxation."""
    if penalty_weight <= 0:
        raise ValueError("penalty weight must be positive")
    term = prob.terminal
    if term.kind == "cost":
        raise ContractError("problem has no terminal set to relax")
    return replace(prob, terminal=TerminalMode("penalty", term.level, term.center, term.matrix,
                                               weight=float(penalty_weight)))


def rotated_cost_of_trajectory(rc: RotatedCost, states, inputs, terminal_kind: str, k: int) -> float:
    """Sum of rotated stage costs from step k plus the chosen rotated terminal cost."""
    if terminal_kind not in ("ytilde", "r"):
        raise ValueError("terminal_kind must be 'ytilde' or 'r'")
    states = np.asarray(states, float)
    inputs = np.asarray(inputs, float)
    if len(states) != len(inputs) + 1:
        raise ContractError("states must be one longer than inputs")
    rc = rc if rc.terminal_kind == terminal_kind else rc.with_terminal(terminal_kind)
    grid = rc.rot.grid
    total = sum(float(rc.stage(states[n], inputs[n], k + n, grid.t(k + n)))
                for n in range(len(inputs)))
    kN = k + len(inputs)
    return total + float(rc.terminal(states[-1], kN, grid.t(kN)))


class MpcController:
    """Stateful receding-horizon controller (the state is the warm start)."""

    def __init__(self, cfg: MpcConfig, rot: Optional[RotationData] = None):
        if cfg.mode != "practical" and rot is None:
            raise ContractError(f"{cfg.mode} mode needs rotation data")
        self.cfg = cfg
        self.rot = rot
        self.ref = cfg.cost.reference
        if rot is not None:
            self.rotated = RotatedCost(cfg.cost, rot, terminal="ytilde")
            self._ideal = ideal_cost(cfg.cost, rot)
        else:
            self.rotated = None
        if cfg.mode == "practical":
            self.stage_cost = cfg.cost
        elif cfg.mode == "ideal":
            self.stage_cost = self._ideal
        else:
            self.stage_cost = self.rotated
        self.penalty_weight = cfg.penalty_weight
        self._prev: Optional[tuple] = None

    def reset(self):
        self._prev = None

    # terminal center (x, u) used by the set and by the terminal law
    def center(self, k):
        if self.cfg.mode == "practical":
            t = self.cfg.t(k)
            return self.ref.r_x(t), self.ref.r_u(t)
        i = min(int(k) - self.rot.grid.k0, len(self.rot.inputs) - 1)
        return self.rot.x_r(k), self.rot.inputs[i]

    def terminal_law(self, x, k):
        cx, cu = self.center(k)
        return cu + self.cfg.K @ (np.asarray(x, float) - cx)

    def problem(self, x, k, kind: str) -> OcpProblem:
        cfg = self.cfg
        grid = TimeGrid(k, cfg.t(k), cfg.N + 1, cfg.t_s)
        center = self.center(k + cfg.N)[0]
        term = TerminalMode(kind, cfg.level, center, cfg.P,
                            weight=self.penalty_weight if kind == "penalty" else 0.0)
        return OcpProblem(cfg.model, self.stage_cost, cfg.constraints, grid, x, cfg.N, term)

    def _estimate_weight(self, x, k, guess):
        """Penalty weight from a hard-constrained solve (floor 1 on the multiplier)."""
        try:
            sol = solve(self.problem(x, k, "ellipsoid"), guess_inputs=guess)
            mu_q = sol.mu_terminal
        except InfeasibleProblemError:
            mu_q = 1.0
        return PENALTY_FACTOR * max(mu_q, 1.0)

    def _candidate(self, x, k):
        """Shifted previous inputs plus the terminal law; None on the first call."""
        if self._prev is None:
            return None, None
        U_prev, X_prev, k_prev = self._prev
        if k != k_prev + 1:
            return None, None
        N = self.cfg.N
        u_tail = self.terminal_law(X_prev[-1], k_prev + N)
        U = np.vstack([U_prev[1:], u_tail[None]])
        X = rollout(self.cfg.model, k, x, U)
        feas = bool(all(check_feasible(self.cfg.constraints, X[n], U[n]) for n in range(N))
                    and float((X[-1] - self.center(k + N)[0]) @ self.cfg.P
                              @ (X[-1] - self.center(k + N)[0])) <= self.cfg.level * (1 + 1e-9))
        return U, feas

    def step(self, x, k) -> MpcStepResult:
        x = np.asarray(x, float)
        guess, cand_ok = self._candidate(x, k)
        if guess is None:
            guess = np.array([self.center(k + n)[1] for n in range(self.cfg.N)])
        if self.cfg.hard:
            prob = self.problem(x, k, "ellipsoid")
        else:
            if self.penalty_weight is None:
                self.penalty_weight = self._estimate_weight(x, k, guess)
            prob = self.problem(x, k, "penalty")
        sol = solve(prob, guess_inputs=guess)
        slack = sol.terminal_slack if sol.terminal_slack > SLACK_SNAP else 0.0
        X, U = sol.states, sol.inputs
        self._prev = (U, X, k)
        rotated_value = None
        if self.cfg.mode == "rotated":
            rotated_value = sol.objective
        elif self.rotated is not None:
            rotated_value = rotated_cost_of_trajectory(self.rotated, X, U, "ytilde", k)
        stats = {"iterations": sol.iterations, "kkt_residual": sol.kkt_residual,
                 "mu_terminal": sol.mu_terminal, "candidate_feasible": cand_ok,
                 "penalty_weight": self.penalty_weight}
        return MpcStepResult(u_apply=U[0].copy(), predicted_states=X, predicted_inputs=U,
                             value=sol.objective, rotated_value=rotated_value,
                             terminal_slack=float(slack), solver_stats=stats)


def practical_step(cfg: MpcConfig, x, k) -> MpcStepResult:
    return MpcController(cfg.with_mode("practical")).step(x, k)


def ideal_step(cfg: MpcConfig, x, k, rot: RotationData) -> MpcStepResult:
    return MpcController(cfg.with_mode("ideal"), rot).step(x, k)


def rotated_ideal_step(cfg: MpcConfig, x, k, rot: RotationData) -> MpcStepResult:
    return MpcController(cfg.with_mode("rotated"), rot).step(x, k)
