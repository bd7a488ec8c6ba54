"""Two-joint planar robot bench in feedback-linearized coordinates.

State x = (q1, q2, dq1, dq2), input v (joint accelerations). The physical torque
is ``tau = C(q, dq) dq + g(q) + B(q) v``; the constraint set bounds both tau and
the joint speeds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import block_diag

from .ltv import ConstraintSet, LtvModel, TimeGrid, box_constraints
from .ocp import OcpSolution, QuadraticStageCost, solve_reference_ocp
from .reference import TabulatedReference, robot_reference
from .rotation import RotationData
from .terminal import TerminalIngredients, lqr_synthesis

BENCH_NAME = "robot2dof"


def inertia(q):
    """B(q), batched over leading axes of q."""
    c2 = np.cos(np.asarray(q, float)[..., 1])
    b11 = 200.0 + 50.0 * c2
    b12 = 23.5 + 25.0 * c2
    b22 = np.full_like(c2, 122.5)
    return np.stack([np.stack([b11, b12], -1), np.stack([b12, b22], -1)], -2)


def coriolis(q, dq):
    """C(q, dq) with C dq the velocity-product torque."""
    q = np.asarray(q, float)
    dq = np.asarray(dq, float)
    s2 = 25.0 * np.sin(q[..., 1])
    d1, d2 = dq[..., 0], dq[..., 1]
    zero = np.zeros_like(d1)
    return s2[..., None, None] * np.stack([np.stack([d1, d1 + d2], -1),
                                           np.stack([-d1, zero], -1)], -2)


def gravity(q):
    q = np.asarray(q, float)
    c12 = np.cos(q[..., 0] + q[..., 1])
    return np.stack([784.8 * np.cos(q[..., 0]) + 245.3 * c12, 245.3 * c12], -1)


def torque(x, v):
    """tau = C(x1, x2) x2 + g(x1) + B(x1) v."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    q, dq = x[..., :2], x[..., 2:]
    return (np.einsum("...ij,...j->...i", coriolis(q, dq), dq) + gravity(q)
            + np.einsum("...ij,...j->...i", inertia(q), v))


def acceleration(x, tau):
    """Inverse of the input transform: v = B^{-1}(tau - C x2 - g)."""
    x = np.asarray(x, float)
    q, dq = x[..., :2], x[..., 2:]
    rhs = np.asarray(tau, float) - np.einsum("...ij,...j->...i", coriolis(q, dq), dq) - gravity(q)
    return np.linalg.solve(inertia(q), rhs[..., None])[..., 0]


def torque_jacobian(x, v):
    """(d tau / dx, d tau / dv) at a single point."""
    q1, q2, d1, d2 = np.asarray(x, float)
    v1, v2 = np.asarray(v, float)
    s2, c2 = np.sin(q2), np.cos(q2)
    s1, s12 = np.sin(q1), np.sin(q1 + q2)
    Jx = np.zeros((2, 4))
    Jx[:, 0] = [-784.8 * s1 - 245.3 * s12, -245.3 * s12]
    Jx[:, 1] = (25.0 * c2 * np.array([d1 * d1 + d1 * d2 + d2 * d2, -d1 * d1])
                + np.array([-245.3 * s12, -245.3 * s12])
                + np.array([-50.0 * s2 * v1 - 25.0 * s2 * v2, -25.0 * s2 * v1]))
    Jx[:, 2] = 25.0 * s2 * np.array([2.0 * d1 + d2, -2.0 * d1])
    Jx[:, 3] = 25.0 * s2 * np.array([d1 + 2.0 * d2, 0.0])
    return Jx, inertia(np.array([q1, q2]))


def double_integrator(t_s: float) -> LtvModel:
    """Exact ZOH sampling of two decoupled double integrators."""
    I = np.eye(2)
    A = np.block([[I, t_s * I], [np.zeros((2, 2)), I]])
    B = np.vstack([0.5 * t_s ** 2 * I, t_s * I])
    return LtvModel.lti(A, B, t_s)


def robot_constraints(torque_limit: float = 4000.0,
                      velocity_limit: float = 1.5 * np.pi) -> ConstraintSet:
    """Rows: tau - L, -tau - L, dq - V, -dq - V (two each)."""

    def h(x, v):
        tau = torque(x, v)
        dq = np.asarray(x, float)[..., 2:]
        return np.concatenate([tau - torque_limit, -tau - torque_limit,
                               dq - velocity_limit, -dq - velocity_limit], axis=-1)

    def jac(x, v):
        Jtx, Jtv = torque_jacobian(x, v)
        Sx = np.zeros((2, 4))
        Sx[:, 2:] = np.eye(2)
        Jx = np.vstack([Jtx, -Jtx, Sx, -Sx])
        Ju = np.vstack([Jtv, -Jtv, np.zeros((4, 2))])
        return Jx, Ju

    return ConstraintSet(4, 2, 8, h, jac=jac, affine=False, name="robot torque and speed")


def velocity_constraints(velocity_limit: float = 1.5 * np.pi) -> ConstraintSet:
    """Speed box only (the affine part of the robot constraints)."""
    return box_constraints(4, 2, x_lo=[-np.inf, -np.inf, -velocity_limit, -velocity_limit],
                           x_hi=[np.inf, np.inf, velocity_limit, velocity_limit], name="speed box")


@dataclass(frozen=True)
class RobotBenchConfig:
    t_s: float = 0.03
    N: int = 10
    M: int = 1200
    Q: Tuple[float, ...] = (10.0, 10.0, 1.0, 1.0)
    R: Tuple[float, ...] = (1.0, 1.0)
    torque_limit: float = 4000.0
    velocity_limit: float = 1.5 * np.pi
    x0: Tuple[float, ...] = (-4.69, -1.62, 0.0, 0.0)
    k0: int = 167
    terminal_level: float = 61.39
    steps: int = 500

    def __post_init__(self):
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be at least 1")
        if len(self.Q) != 4 or len(self.R) != 2 or len(self.x0) != 4:
            raise ValueError("Q needs 4 entries, R 2 and x0 4")
        if min(self.Q) <= 0 or min(self.R) <= 0:
            raise ValueError("weights must be positive")
        if self.torque_limit <= 0 or self.velocity_limit <= 0 or self.terminal_level <= 0:
            raise ValueError("limits and terminal level must be positive")
        if self.k0 < 0 or self.steps < 0:
            raise ValueError("k0 and steps must be nonnegative")
        if self.k0 + self.steps + self.N > self.M:
            raise ValueError(f"closed loop needs k0 + steps + N <= M "
                             f"({self.k0} + {self.steps} + {self.N} > {self.M})")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown bench parameter {k!r}")
            kw[k] = tuple(float(e) for e in v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)


class RobotBench:
    """Model, reference, costs, constraints and terminal ingredients of the bench.

    The long reference OCP is solved on first use and cached.
    """

    def __init__(self, cfg: RobotBenchConfig = RobotBenchConfig(), reference=None):
        self.cfg = cfg
        self.model = double_integrator(cfg.t_s)
        self.grid = TimeGrid(0, 0.0, cfg.M + 1, cfg.t_s)
        self.reference = robot_reference(cfg.t_s, cfg.M) if reference is None else reference
        self.Q = np.diag(cfg.Q)
        self.R = np.diag(cfg.R)
        self.W = block_diag(self.Q, self.R)
        A, B = self.model.matrices(0)
        self.P, self.K = lqr_synthesis(A, B, self.Q, self.R)
        self.cost = QuadraticStageCost(self.W, self.P, self.reference)
        self.constraints = robot_constraints(cfg.torque_limit, cfg.velocity_limit)
        self._ocp: Optional[OcpSolution] = None

    @property
    def x0(self):
        return np.array(self.cfg.x0, dtype=float)

    def reference_ocp(self) -> OcpSolution:
        if self._ocp is None:
            x_init = self.reference.r_x(self.grid.t0)
            self._ocp = solve_reference_ocp(self.model, self.cost, self.constraints,
                                            self.reference, self.grid, x_init, self.cfg.M)
        return self._ocp

    def rotation(self) -> RotationData:
        return RotationData.from_solution(self.reference_ocp(), self.model)

    def terminal(self, center: str = "r") -> TerminalIngredients:
        """Terminal ingredients centered at r ('r') or at the feasible reference ('yr')."""
        if center == "r":
            ref, grid = self.reference, self.grid

            def c(k):
                t = grid.t(k)
                return ref.r_x(t), ref.r_u(t)
        elif center == "yr":
            rot = self.rotation()

            def c(k):
                return rot.x_r(k), rot.inputs[min(int(k) - rot.grid.k0, len(rot.inputs) - 1)]
        else:
            raise ValueError("center must be 'r' or 'yr'")
        return TerminalIngredients(self.P, self.K, self.cfg.terminal_level, c)

    def feasible_variant(self) -> "RobotBench":
        """Same bench tracking y^r itself, so the reference satisfies the dynamics."""
        sol = self.reference_ocp()
        ref = TabulatedReference(self.grid, sol.states, sol.inputs)
        other = RobotBench(self.cfg, reference=ref)
        return other


def reproduce_figure_data(cfg: RobotBenchConfig = RobotBenchConfig(), bench=None):
    """Closed-loop practical and ideal runs from (x0, k0); returns (practical, ideal) traces."""
    from .mpc import MpcConfig, MpcController
    from .simulator import run_closed_loop
    bench = RobotBench(cfg) if bench is None else bench
    rot = bench.rotation()
    out = []
    for mode in ("practical", "ideal"):
        ctrl = MpcController(MpcConfig.for_bench(bench, mode), rot=rot)
        out.append(run_closed_loop(bench.model, ctrl, bench.reference, bench.x0, cfg.k0, cfg.steps))
    return tuple(out)
