"""Terminal ingredients: LQR weight and gain, ellipsoidal set, sampling validation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import SynthesisError
from .ltv import ConstraintSet, LtvModel, TimeGrid

DARE_MAX_ITER = 200
DECREASE_TOL = 1e-9
LEVEL_BRACKET = (1e-6, 1e6)


def dare_residual(A, B, Q, R, P) -> float:
    """max |A'PA - P - A'PB (R + B'PB)^{-1} B'PA + Q|."""
    BtPA = B.T @ P @ A
    res = A.T @ P @ A - P - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.abs(res).max())


def _stabilizable(A, B, tol=1e-9) -> bool:
    n = A.shape[0]
    for ev in np.linalg.eigvals(A):
        if abs(ev) >= 1.0 - tol:
            M = np.hstack([A - ev * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.abs(M).max())) < n:
                return False
    return True


def lqr_synthesis(A, B, Q, R, max_iter: int = DARE_MAX_ITER):
    """DARE solution by the structure-preserving doubling algorithm.

    Returns (P, K) with the feedback convention ``u = K x``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise SynthesisError("R must be positive definite")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise SynthesisError("Q must be positive semidefinite")
    if not _stabilizable(A, B):
        raise SynthesisError("(A, B) is not stabilizable")
    Ak = A.copy()
    G = B @ np.linalg.solve(R, B.T)
    H = Q.copy()
    I = np.eye(n)
    for _ in range(max_iter):
        W = I + G @ H
        WiA = np.linalg.solve(W, Ak)
        WiG = np.linalg.solve(W, G)
        H_new = H + Ak.T @ H @ WiA
        G = G + Ak @ WiG @ Ak.T
        Ak = Ak @ WiA
        H_new = 0.5 * (H_new + H_new.T)
        G = 0.5 * (G + G.T)
        done = np.abs(H_new - H).max() <= 1e-14 * max(1.0, np.abs(H_new).max())
        H = H_new
        if done:
            break
    else:
        raise SynthesisError(f"doubling iteration did not converge in {max_iter} iterations")
    P = H
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0 - 1e-9:
        raise SynthesisError("closed loop A + BK is not Schur stable")
    return P, K


@dataclass(frozen=True)
class TerminalIngredients:
    """Ellipsoid ``(x - c_x(k))' P (x - c_x(k)) <= level`` with law ``u = c_u(k) + K (x - c_x(k))``.

    ``center(k)`` returns the pair (c_x, c_u) at step k.
    """

    P: np.ndarray
    K: np.ndarray
    level: float
    center: Callable[[int], tuple]

    def __post_init__(self):
        if not self.level > 0:
            raise ValueError("terminal level must be positive")

    def with_level(self, level: float) -> "TerminalIngredients":
        return replace(self, level=float(level))

    def with_center(self, center) -> "TerminalIngredients":
        return replace(self, center=center)

    def value(self, x, k):
        d = np.asarray(x, float) - self.center(k)[0]
        return np.einsum("...i,ij,...j->...", d, self.P, d)

    def control(self, x, k):
        cx, cu = self.center(k)
        return cu + (np.asarray(x, float) - cx) @ self.K.T


def terminal_membership(ti: TerminalIngredients, x, k) -> bool:
    return bool(ti.value(x, k) <= ti.level)


@dataclass
class TerminalReport:
    n_samples: int
    level: float
    decrease_margin: float
    invariance_margin: float
    constraint_margin: float
    decrease_ok: bool
    invariance_ok: bool
    constraints_ok: bool

    @property
    def passed(self) -> bool:
        return self.decrease_ok and self.invariance_ok and self.constraints_ok

    def as_dict(self):
        return {"n_samples": self.n_samples, "level": self.level,
                "decrease_margin": self.decrease_margin,
                "invariance_margin": self.invariance_margin,
                "constraint_margin": self.constraint_margin,
                "decrease": "PASS" if self.decrease_ok else "FAIL",
                "invariance": "PASS" if self.invariance_ok else "FAIL",
                "constraints": "PASS" if self.constraints_ok else "FAIL"}


class _SampleSet:
    """Unit-ball samples and everything about them that does not depend on the level.

    All costs are quadratic, so each term is stored as its value, gradient and
    Hessian at the center; evaluation at a level is then exact in deviation form.
    """

    def __init__(self, ti, model, cost, grid, n_samples, rng):
        if n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        nx = ti.P.shape[0]
        steps = grid.steps[:-1] if grid.length > 1 else grid.steps
        z = rng.normal(size=(n_samples, nx))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= rng.uniform(size=(n_samples, 1)) ** (1.0 / nx)
        L = np.linalg.cholesky(ti.P)
        # delta = sqrt(level) L^{-T} z has P-norm ||z||
        self.dir = np.linalg.solve(L.T, z.T).T
        self.k = rng.choice(steps, size=n_samples)
        self.ti, self.model, self.cost, self.grid = ti, model, cost, grid
        self.groups = {}
        for k in np.unique(self.k):
            idx = np.flatnonzero(self.k == k)
            cx, cu = ti.center(k)
            cx1, _ = ti.center(k + 1)
            A, B = model.matrices(k)
            t, t1 = grid.t(k), grid.t(k + 1)
            Hs, gs, _ = cost.stage_terms(k, t)
            Hp, gp, _ = cost.terminal_terms(k, t)
            Hp1, gp1, _ = cost.terminal_terms(k + 1, t1)
            zc = np.concatenate([cx, cu])
            # center drift f(c) - c(k+1); zero when the center is dynamically feasible
            e = A @ cx + B @ cu - cx1
            self.groups[k] = dict(
                idx=idx, cx=cx, cu=cu, cx1=cx1, A=A, B=B, e=e, Acl=A + B @ ti.K,
                q0=float(cost.stage(cx, cu, k, t)), qg=Hs @ zc + gs, qH=Hs,
                p0=float(cost.terminal(cx, k, t)), pg=Hp @ cx + gp, pH=Hp,
                p10=float(cost.terminal(cx1, k + 1, t1)), p1g=Hp1 @ cx1 + gp1, p1H=Hp1)

    def evaluate(self, level, constraints: ConstraintSet):
        ti = self.ti
        n = len(self.k)
        s = np.sqrt(level)
        dec = np.empty(n)
        scale = np.empty(n)
        inv = np.empty(n)
        X = np.empty((n, ti.P.shape[0]))
        U = np.empty((n, ti.K.shape[0]))
        for k, gr in self.groups.items():
            idx = gr["idx"]
            d = s * self.dir[idx]
            du = d @ ti.K.T
            dz = np.concatenate([d, du], axis=1)
            d1 = gr["e"] + d @ gr["Acl"].T
            q = gr["q0"] + dz @ gr["qg"] + 0.5 * np.einsum("ni,ij,nj->n", dz, gr["qH"], dz)
            p = gr["p0"] + d @ gr["pg"] + 0.5 * np.einsum("ni,ij,nj->n", d, gr["pH"], d)
            # d1 is the successor's offset from c_x(k+1)
            p1 = gr["p10"] + d1 @ gr["p1g"] + 0.5 * np.einsum("ni,ij,nj->n", d1, gr["p1H"], d1)
            dec[idx] = p1 - p + q
            scale[idx] = 1.0 + abs(p1) + abs(p) + abs(q)
            inv[idx] = np.einsum("ni,ij,nj->n", d1, ti.P, d1)
            X[idx] = gr["cx"] + d
            U[idx] = gr["cu"] + du
        h = constraints(X, U)
        hmax = h.max(axis=1) if h.size else np.full(n, -np.inf)
        return dec, scale, inv, hmax


def _report(ss: _SampleSet, level, constraints) -> TerminalReport:
    dec, scale, inv, hmax = ss.evaluate(level, constraints)
    dec_margin = float(np.max(dec / scale))
    inv_margin = float(level - inv.max())
    con_margin = float(-hmax.max())
    return TerminalReport(
        n_samples=len(dec), level=float(level),
        decrease_margin=-dec_margin, invariance_margin=inv_margin, constraint_margin=con_margin,
        decrease_ok=dec_margin <= DECREASE_TOL,
        invariance_ok=inv_margin >= -DECREASE_TOL * max(1.0, level),
        constraints_ok=con_margin >= 0.0)


def validate_terminal_conditions(ti: TerminalIngredients, model: LtvModel, cost,
                                 constraints: ConstraintSet, grid: TimeGrid,
                                 n_samples: int = 10_000, seed: int = 0) -> TerminalReport:
    """Monte-Carlo check of decrease, invariance and constraint satisfaction.

    States are drawn uniformly from the ellipsoid at steps of ``grid`` (all but the
    last, which has no successor), and the terminal law is applied. The decrease
    test is ``p(x+, k+1) - p(x, k) + q(x, kappa(x), k) <= 0`` up to a tolerance of
    1e-9 relative to the magnitude of the terms.
    """
    ss = _SampleSet(ti, model, cost, grid, n_samples, np.random.default_rng(seed))
    return _report(ss, ti.level, constraints)


def max_feasible_level(ti: TerminalIngredients, model: LtvModel, cost, constraints: ConstraintSet,
                       grid: TimeGrid, n_samples: int = 10_000, seed: int = 0,
                       bracket=LEVEL_BRACKET, iterations: int = 60) -> float:
    """Largest level in ``bracket`` whose sample-based validation passes.

    Geometric bisection with one fixed sample set, so the answer is reproducible
    under a seed. Raises SynthesisError if even the lower end fails.
    """
    lo, hi = bracket
    ss = _SampleSet(ti, model, cost, grid, n_samples, np.random.default_rng(seed))
    if _report(ss, hi, constraints).passed:
        return float(hi)
    if not _report(ss, lo, constraints).passed:
        raise SynthesisError(f"terminal conditions fail already at level {lo:g}")
    for _ in range(iterations):
        mid = np.sqrt(lo * hi)
        if _report(ss, mid, constraints).passed:
            lo = mid
        else:
            hi = mid
    return float(lo)
