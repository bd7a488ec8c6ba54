"""Discrete-time LTV models, path constraints and time grids.

The model is ``x[k+1] = A_k x[k] + B_k u[k]``. Matrices come from a generator
``dyn(k)`` so that time-invariant, periodic and tabulated systems share one type.
Constraints are ``h(x, u) <= 0`` element-wise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DimensionError

FEASIBILITY_TOL = 1e-8
FD_STEP = 1e-6


@dataclass(frozen=True)
class LtvModel:
    """Linear time-varying model with sampling time ``t_s``."""

    n_x: int
    n_u: int
    dyn: Callable[[int], Tuple[np.ndarray, np.ndarray]]
    t_s: float
    time_invariant: bool = False

    def __post_init__(self):
        if self.t_s <= 0:
            raise ValueError(f"sampling time must be positive, got {self.t_s}")

    @classmethod
    def lti(cls, A, B, t_s):
        A = np.array(A, dtype=float)
        B = np.array(B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape != (A.shape[0], A.shape[0]) or B.shape[0] != A.shape[0]:
            raise DimensionError(f"incompatible shapes A{A.shape}, B{B.shape}")
        A.setflags(write=False)
        B.setflags(write=False)
        return cls(A.shape[0], B.shape[1], lambda k: (A, B), t_s, time_invariant=True)

    @classmethod
    def from_table(cls, As, Bs, t_s):
        """Tabulated LTV model; step indices past the table reuse the last pair."""
        As = np.asarray(As, dtype=float)
        Bs = np.asarray(Bs, dtype=float)
        last = len(As) - 1

        def dyn(k):
            i = min(int(k), last)
            return As[i], Bs[i]

        return cls(As.shape[1], Bs.shape[2], dyn, t_s)

    def matrices(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        A, B = self.dyn(k)
        if A.shape != (self.n_x, self.n_x) or B.shape != (self.n_x, self.n_u):
            raise DimensionError(
                f"dyn({k}) returned A{A.shape}, B{B.shape}; expected "
                f"({self.n_x},{self.n_x}) and ({self.n_x},{self.n_u})")
        return A, B

    def f(self, k, x, u):
        """Apply the dynamics at step k; broadcasts over leading batch axes."""
        A, B = self.matrices(k)
        return x @ A.T + u @ B.T


def step(model: LtvModel, k: int, x, u) -> np.ndarray:
    """One step of the dynamics with dimension checks."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n_x,) or u.shape != (model.n_u,):
        raise DimensionError(
            f"expected x of shape ({model.n_x},) and u of shape ({model.n_u},), "
            f"got {x.shape} and {u.shape}")
    return model.f(k, x, u)


def rollout(model: LtvModel, k0: int, x0, inputs) -> np.ndarray:
    """States x[k0..k0+len(inputs)] obtained by applying ``inputs`` from x0."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    states = np.empty((len(inputs) + 1, model.n_x))
    states[0] = x0
    for i, u in enumerate(inputs):
        states[i + 1] = model.f(k0 + i, states[i], u)
    return states


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of step indices ``k0 .. k0+length-1`` with t(k) = t0 + (k-k0) t_s."""

    k0: int
    t0: float
    length: int
    t_s: float

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("time grid needs at least one point")
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")

    def t(self, k):
        return self.t0 + (np.asarray(k) - self.k0) * self.t_s

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.k0, self.k0 + self.length)

    @property
    def times(self) -> np.ndarray:
        return self.t(self.steps)

    @property
    def k_last(self) -> int:
        return self.k0 + self.length - 1

    def contains(self, k) -> bool:
        return self.k0 <= k <= self.k_last

    def sub(self, k: int, length: int) -> "TimeGrid":
        """Sub-grid starting at step k that shares this grid's clock."""
        return TimeGrid(k, float(self.t(k)), length, self.t_s)


@dataclass(frozen=True)
class ConstraintSet:
    """Path constraint ``h(x, u) <= 0`` with optional analytic Jacobians.

    ``h`` must broadcast over leading batch axes. ``jac(x, u)`` returns the pair
    (dh/dx, dh/du) at a single point; when omitted, central differences are used.
    """

    n_x: int
    n_u: int
    n_h: int
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None
    affine: bool = False
    name: str = field(default="constraints", compare=False)

    def __call__(self, x, u):
        return self.h(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def linearize(self, x, u):
        """Return (Jx, Ju, h(x, u)) at a single point."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        h0 = self.h(x, u)
        if self.jac is not None:
            Jx, Ju = self.jac(x, u)
            return np.asarray(Jx, float), np.asarray(Ju, float), h0
        return _fd_jacobian(self.h, x, u, self.n_h) + (h0,)


def _fd_jacobian(h, x, u, n_h):
    Jx = np.empty((n_h, x.size))
    Ju = np.empty((n_h, u.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = FD_STEP
        Jx[:, i] = (h(x + e, u) - h(x - e, u)) / (2 * FD_STEP)
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = FD_STEP
        Ju[:, i] = (h(x, u + e) - h(x, u - e)) / (2 * FD_STEP)
    return Jx, Ju


def affine_constraints(Cx, Cu, d, name="affine") -> ConstraintSet:
    """Rows ``Cx x + Cu u - d <= 0``."""
    Cx = np.atleast_2d(np.asarray(Cx, dtype=float))
    Cu = np.atleast_2d(np.asarray(Cu, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    if not (Cx.shape[0] == Cu.shape[0] == d.size):
        raise DimensionError("affine constraint blocks disagree on the row count")

    def h(x, u):
        return x @ Cx.T + u @ Cu.T - d

    return ConstraintSet(Cx.shape[1], Cu.shape[1], d.size, h,
                         jac=lambda x, u: (Cx, Cu), affine=True, name=name)


def box_constraints(n_x, n_u, x_lo=None, x_hi=None, u_lo=None, u_hi=None,
                    name="box") -> ConstraintSet:
    """Simple bounds; ``None`` or infinite entries are dropped."""
    rows_x, rows_u, rhs = [], [], []

    def add(bounds, dim, sign, is_state):
        if bounds is None:
            return
        bounds = np.broadcast_to(np.asarray(bounds, dtype=float), (dim,))
        for i, b in enumerate(bounds):
            if not np.isfinite(b):
                continue
            rx, ru = np.zeros(n_x), np.zeros(n_u)
            (rx if is_state else ru)[i] = sign
            rows_x.append(rx)
            rows_u.append(ru)
            rhs.append(sign * b)

    add(x_hi, n_x, 1.0, True)
    add(x_lo, n_x, -1.0, True)
    add(u_hi, n_u, 1.0, False)
    add(u_lo, n_u, -1.0, False)
    if not rhs:
        return no_constraints(n_x, n_u)
    return affine_constraints(np.array(rows_x), np.array(rows_u), np.array(rhs), name=name)


def no_constraints(n_x, n_u) -> ConstraintSet:
    def h(x, u):
        return np.zeros(np.shape(x)[:-1] + (0,))

    return ConstraintSet(n_x, n_u, 0, h,
                         jac=lambda x, u: (np.zeros((0, n_x)), np.zeros((0, n_u))),
                         affine=True, name="none")


def check_feasible(cs: ConstraintSet, x, u, tol: float = FEASIBILITY_TOL) -> bool:
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    h = cs(x, u)
    return bool(h.size == 0 or np.max(h) <= tol)
