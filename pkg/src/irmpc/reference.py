"""Time-parameterized reference trajectories and their dynamics-infeasibility."""
from __future__ import annotations

from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DomainError
from .ltv import LtvModel, TimeGrid

_GRID_SNAP = 1e-9


class ReferenceTrajectory:
    """A pair of functions ``t -> r_x(t)``, ``t -> r_u(t)`` on ``[t_min, t_max]``.

    Bounds of ``None`` mean unbounded on that side. Nothing here assumes the
    pair satisfies any model's dynamics.
    """

    n_x: int
    n_u: int
    t_min: Optional[float] = None
    t_max: Optional[float] = None

    def _check(self, t):
        tol = 1e-12 * max(1.0, abs(t))
        if (self.t_min is not None and t < self.t_min - tol) or \
                (self.t_max is not None and t > self.t_max + tol):
            raise DomainError(f"t={t} outside reference domain [{self.t_min}, {self.t_max}]")

    def r_x(self, t) -> np.ndarray:
        raise NotImplementedError

    def r_u(self, t) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t) -> Tuple[np.ndarray, np.ndarray]:
        return self.r_x(t), self.r_u(t)


class FunctionReference(ReferenceTrajectory):
    def __init__(self, rx: Callable, ru: Callable, n_x: int, n_u: int,
                 t_min=None, t_max=None):
        self._rx, self._ru = rx, ru
        self.n_x, self.n_u = n_x, n_u
        self.t_min, self.t_max = t_min, t_max

    @classmethod
    def constant(cls, x_ref, u_ref):
        x_ref = np.array(x_ref, dtype=float)
        u_ref = np.array(u_ref, dtype=float)
        return cls(lambda t: x_ref.copy(), lambda t: u_ref.copy(), x_ref.size, u_ref.size)

    def r_x(self, t):
        self._check(t)
        return np.asarray(self._rx(t), dtype=float)

    def r_u(self, t):
        self._check(t)
        return np.asarray(self._ru(t), dtype=float)


class TabulatedReference(ReferenceTrajectory):
    """Reference stored on a time grid; queries must hit grid points.

    ``inputs`` may be one row shorter than ``states`` (trajectory format); the
    final grid point then reuses the last input.
    """

    def __init__(self, grid: TimeGrid, states, inputs):
        self.grid = grid
        self.states = np.array(states, dtype=float)
        self.inputs = np.array(inputs, dtype=float)
        if len(self.states) != grid.length or len(self.inputs) not in (grid.length, grid.length - 1):
            raise DomainError("tabulated reference does not match its grid length")
        self.n_x = self.states.shape[1]
        self.n_u = self.inputs.shape[1]
        self.t_min = grid.t0
        self.t_max = float(grid.t(grid.k_last))

    def index(self, t) -> int:
        self._check(t)
        pos = (t - self.grid.t0) / self.grid.t_s
        i = int(round(pos))
        if abs(pos - i) > _GRID_SNAP * max(1.0, abs(pos)) * 1e3:
            raise DomainError(f"t={t} is not on the tabulation grid")
        return i

    def r_x(self, t):
        return self.states[self.index(t)].copy()

    def r_u(self, t):
        return self.inputs[min(self.index(t), len(self.inputs) - 1)].copy()


class PathTimingLaw:
    """Timing law ``theta' = v_ref(theta) / ||dp/dtheta||`` integrated by fixed-step RK4.

    ``v_ref`` is 1 while theta < 0 and 0 afterwards; theta is clamped at 0 once it
    gets there. The trajectory is tabulated on sub-steps of ``substep`` seconds.
    """

    def __init__(self, dpath: Callable, theta0: float, t_max: float, substep: float,
                 t0: float = 0.0, theta_end: float = 0.0):
        self.dpath = dpath
        self.theta0 = float(theta0)
        self.theta_end = float(theta_end)
        self.t0 = float(t0)
        self.t_max = float(t_max)
        self.h = float(substep)
        n = int(np.ceil((self.t_max - self.t0) / self.h)) + 1
        table = np.empty(n + 1)
        table[0] = self.theta0
        for i in range(n):
            table[i + 1] = self._rk4(table[i], self.h)
        self.table = table

    def v_ref(self, theta) -> float:
        return 1.0 if theta < self.theta_end else 0.0

    def rate(self, theta) -> float:
        v = self.v_ref(theta)
        if v == 0.0:
            return 0.0
        return v / np.linalg.norm(self.dpath(theta))

    def _rk4(self, theta, h):
        if theta >= self.theta_end:
            return self.theta_end
        k1 = self.rate(theta)
        k2 = self.rate(theta + 0.5 * h * k1)
        k3 = self.rate(theta + 0.5 * h * k2)
        k4 = self.rate(theta + h * k3)
        return min(theta + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), self.theta_end)

    def theta(self, t) -> float:
        if t < self.t0 - 1e-12 or t > self.t_max + 1e-9:
            raise DomainError(f"t={t} outside timing-law domain [{self.t0}, {self.t_max}]")
        s = max(t - self.t0, 0.0) / self.h
        i = min(int(np.floor(s)), len(self.table) - 2)
        rem = (s - i) * self.h
        if rem <= 1e-12 * self.h:
            return float(self.table[i])
        return float(self._rk4(self.table[i], rem))


class PathReference(ReferenceTrajectory):
    """Reference from a geometric path p(theta) and a timing law.

    r_x = (p, p' theta_dot), r_u = p'' theta_dot^2 + p' theta_ddot, i.e. the
    position/velocity/acceleration of a double-integrator chain.
    """

    def __init__(self, path: Callable, dpath: Callable, ddpath: Callable,
                 timing: PathTimingLaw):
        self.path, self.dpath, self.ddpath = path, dpath, ddpath
        self.timing = timing
        dim = np.size(path(timing.theta0))
        self.n_x, self.n_u = 2 * dim, dim
        self.t_min, self.t_max = timing.t0, timing.t_max

    def _derivatives(self, t):
        th = self.timing.theta(t)
        dp = np.asarray(self.dpath(th), dtype=float)
        ddp = np.asarray(self.ddpath(th), dtype=float)
        thd = self.timing.rate(th)
        # theta_ddot from d/dt (1/||p'||); zero once the path end is reached
        thdd = -float(dp @ ddp) * thd ** 2 / float(dp @ dp) if thd != 0.0 else 0.0
        return th, dp, ddp, thd, thdd

    def r_x(self, t):
        self._check(t)
        th, dp, _, thd, _ = self._derivatives(t)
        return np.concatenate([np.asarray(self.path(th), dtype=float), dp * thd])

    def r_u(self, t):
        self._check(t)
        _, dp, ddp, thd, thdd = self._derivatives(t)
        return ddp * thd ** 2 + dp * thdd

    def at_path_end(self, t) -> bool:
        return self.timing.theta(t) >= self.timing.theta_end


ROBOT_THETA0 = -5.3


def robot_path(theta):
    a = theta - np.pi / 3
    return np.array([a, 5.0 * np.sin(0.6 * a)])


def robot_dpath(theta):
    a = theta - np.pi / 3
    return np.array([1.0, 3.0 * np.cos(0.6 * a)])


def robot_ddpath(theta):
    a = theta - np.pi / 3
    return np.array([0.0, -1.8 * np.sin(0.6 * a)])


def robot_reference(t_s: float, horizon_len: int) -> PathReference:
    """Two-joint path reference starting at theta = -5.3 with unit joint-speed norm.

    The domain is ``[0, horizon_len * t_s]``. The velocity and input jump to zero
    where theta reaches 0, so the reference is not dynamically feasible there.
    """
    if t_s <= 0:
        raise ValueError("t_s must be positive")
    timing = PathTimingLaw(robot_dpath, ROBOT_THETA0, t_max=horizon_len * t_s,
                           substep=t_s / 10.0)
    return PathReference(robot_path, robot_dpath, robot_ddpath, timing)


def sample(ref: ReferenceTrajectory, grid: TimeGrid):
    """Evaluate the reference on every grid point; returns (rx, ru) arrays."""
    times = grid.times
    rx = np.array([ref.r_x(t) for t in times]).reshape(len(times), -1)
    ru = np.array([ref.r_u(t) for t in times]).reshape(len(times), -1)
    return rx, ru


def infeasibility_profile(ref: ReferenceTrajectory, model: LtvModel, grid: TimeGrid) -> np.ndarray:
    """eps_k = ||r_x(t_{k+1}) - f_k(r_x(t_k), r_u(t_k))|| for each step of the grid."""
    rx, ru = sample(ref, grid)
    eps = np.empty(grid.length - 1)
    for i, k in enumerate(grid.steps[:-1]):
        eps[i] = np.linalg.norm(rx[i + 1] - model.f(k, rx[i], ru[i]))
    return eps


def discontinuity_steps(ref: ReferenceTrajectory, grid: TimeGrid):
    """Grid steps at which a path reference first reports the end of the path."""
    if not isinstance(ref, PathReference):
        return []
    ended = np.array([ref.at_path_end(t) for t in grid.times])
    first = np.flatnonzero(ended[1:] & ~ended[:-1]) + 1
    return [int(grid.steps[i]) for i in first]
