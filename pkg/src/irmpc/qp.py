"""Stage-structured convex QP solved by a primal-dual interior-point method.

Problem data (all stages share n_x, n_u, n_h)::

    min   sum_n 1/2 z_n' H_n z_n + g_n' z_n + c_n  +  1/2 x_M' H_M x_M + g_M' x_M + c_M  +  w s
    s.t.  x_0 = x_init                                   (lam_0)
          x_{n+1} = A_n x_n + B_n u_n + b_n              (lam_{n+1})
          D_n z_n + e_n <= 0                             (mu_n)
          (x_M - c)' P (x_M - c) - level <= s            (mu_q)   optional
          s >= 0                                         (mu_s)   only when relaxed

with z_n = (x_n, u_n). Multipliers follow the Lagrangian
``f + lam_0'(x_0 - x_init) + sum lam_{n+1}'(x_{n+1} - A x_n - B u_n - b_n) + sum mu_n' h_n``.

Each Newton system is reduced to an equality-constrained LQ problem and solved
by a backward Riccati sweep, so the cost per iteration is linear in M.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import ConvergenceError, IllPosedError, InfeasibleProblemError

GAP_TOL = 1e-10
RESIDUAL_TOL = 1e-9
MAX_ITER = 200
_STEP_TO_BOUNDARY = 0.995
_DIVERGENCE = 1e12
_STALL_TOL = 1e-8


@dataclass
class TerminalEllipsoid:
    """Terminal set ``(x - center)' P (x - center) <= level``.

    ``penalty`` switches to the exact-penalty (l1) relaxation with that weight.
    """

    P: np.ndarray
    center: np.ndarray
    level: float
    penalty: Optional[float] = None

    def value(self, x):
        d = np.asarray(x) - self.center
        return float(d @ self.P @ d) - self.level


@dataclass
class StructuredQP:
    A: np.ndarray          # (M, nx, nx)
    B: np.ndarray          # (M, nx, nu)
    b: np.ndarray          # (M, nx)
    H: np.ndarray          # (M, nz, nz)
    g: np.ndarray          # (M, nz)
    c: np.ndarray          # (M,)
    HM: np.ndarray
    gM: np.ndarray
    cM: float
    D: np.ndarray          # (M, nh, nz)
    e: np.ndarray          # (M, nh)
    x_init: np.ndarray
    terminal: Optional[TerminalEllipsoid] = None

    @property
    def M(self):
        return self.A.shape[0]

    @property
    def nx(self):
        return self.A.shape[1]

    @property
    def nu(self):
        return self.B.shape[2]

    @property
    def nh(self):
        return self.D.shape[1]

    def objective(self, X, U, s=0.0):
        Z = np.concatenate([X[:-1], U], axis=1)
        val = 0.5 * np.einsum("ni,nij,nj->", Z, self.H, Z) + np.einsum("ni,ni->", self.g, Z)
        val += self.c.sum()
        xM = X[-1]
        val += 0.5 * xM @ self.HM @ xM + self.gM @ xM + self.cM
        if self.terminal is not None and self.terminal.penalty is not None:
            val += self.terminal.penalty * s
        return float(val)


@dataclass
class QPResult:
    X: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    slack: float
    mu_terminal: float
    mu_slack: float
    objective: float
    iterations: int
    gap: float
    residuals: dict = field(default_factory=dict)


class _Riccati:
    """Factorization of the reduced Newton system for one interior-point iteration."""

    def __init__(self, A, B, Ht, HMt, nx):
        M = A.shape[0]
        self.A, self.B, self.nx, self.M = A, B, nx, M
        nu = B.shape[2]
        self.S = np.empty((M + 1, nx, nx))
        self.K = np.empty((M, nu, nx))
        self.Qux = np.empty((M, nu, nx))
        self.chol = [None] * M
        S = 0.5 * (HMt + HMt.T)
        self.S[M] = S
        for n in range(M - 1, -1, -1):
            An, Bn, Hn = A[n], B[n], Ht[n]
            SA = S @ An
            SB = S @ Bn
            Qxx = Hn[:nx, :nx] + An.T @ SA
            Qux = Hn[nx:, :nx] + Bn.T @ SA
            Quu = Hn[nx:, nx:] + Bn.T @ SB
            try:
                cf = cho_factor(Quu)
            except LinAlgError as exc:
                raise IllPosedError(f"reduced input Hessian not positive definite at stage {n}") from exc
            K = -cho_solve(cf, Qux)
            S = Qxx + Qux.T @ K
            S = 0.5 * (S + S.T)
            self.S[n], self.K[n], self.Qux[n], self.chol[n] = S, K, Qux, cf

    def solve(self, q, qM, r0, r):
        """Newton step for gradients q (M, nz), qM and dynamics offsets r0, r (M, nx).

        Returns (dX, dU, lam) where lam are the new equality multipliers.
        """
        A, B, nx, M = self.A, self.B, self.nx, self.M
        s_vec = np.empty((M + 1, nx))
        kff = np.empty((M, B.shape[2]))
        s = qM.copy()
        s_vec[M] = s
        for n in range(M - 1, -1, -1):
            w = self.S[n + 1] @ r[n] + s
            qx = q[n, :nx] + A[n].T @ w
            qu = q[n, nx:] + B[n].T @ w
            k = -cho_solve(self.chol[n], qu)
            s = qx + self.Qux[n].T @ k
            s_vec[n], kff[n] = s, k
        dX = np.empty((M + 1, nx))
        dU = np.empty((M, B.shape[2]))
        dX[0] = r0
        for n in range(M):
            dU[n] = self.K[n] @ dX[n] + kff[n]
            dX[n + 1] = A[n] @ dX[n] + B[n] @ dU[n] + r[n]
        lam = -(np.einsum("nij,nj->ni", self.S, dX) + s_vec)
        return dX, dU, lam


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _unclipped_step(t, dt, mu, dmu, *scalar_groups):
    """Largest step keeping all slacks and multipliers nonnegative (may exceed 1)."""
    a = np.inf
    pairs = [(t.ravel(), dt.ravel()), (mu.ravel(), dmu.ravel())]
    for group in scalar_groups:
        pairs += [(np.array([v]), np.array([dv])) for v, dv in group]
    for v, dv in pairs:
        neg = dv < 0
        if np.any(neg):
            a = min(a, float(np.min(-v[neg] / dv[neg])))
    return a


def solve_structured_qp(qp: StructuredQP, U_guess=None, max_iter: int = MAX_ITER,
                        gap_tol: float = GAP_TOL, tol: float = RESIDUAL_TOL) -> QPResult:
    """Mehrotra predictor-corrector interior point on the stage-structured QP."""
    M, nx, nu, nh = qp.M, qp.nx, qp.nu, qp.nh
    term = qp.terminal
    has_q = term is not None
    relaxed = has_q and term.penalty is not None
    w = term.penalty if relaxed else 0.0

    U = np.zeros((M, nu)) if U_guess is None else np.array(U_guess, dtype=float)
    X = np.empty((M + 1, nx))
    X[0] = qp.x_init
    for n in range(M):
        X[n + 1] = qp.A[n] @ X[n] + qp.B[n] @ U[n] + qp.b[n]
    lam = np.zeros((M + 1, nx))

    Z = np.concatenate([X[:-1], U], axis=1)
    C = np.einsum("nij,nj->ni", qp.D, Z) + qp.e
    t = np.maximum(-C, 1.0)
    mu = 1.0 / t
    s = 0.0
    if has_q:
        cq = term.value(X[-1])
        if relaxed:
            s = max(cq, 0.0) + 1.0
            t_s = s
            mu_s = 1.0 / t_s
        t_q = max(-(cq - s), 1.0)
        mu_q = 1.0 / t_q
    if not relaxed:
        t_s = mu_s = 0.0
    if not has_q:
        t_q = mu_q = 0.0
    m_total = M * nh + (1 if has_q else 0) + (1 if relaxed else 0)

    stalled = False
    it = 0
    gap = np.inf
    res = {}
    for it in range(max_iter + 1):
        Z = np.concatenate([X[:-1], U], axis=1)
        xM = X[-1]
        C = np.einsum("nij,nj->ni", qp.D, Z) + qp.e
        r_c = C + t
        grad = np.einsum("nij,nj->ni", qp.H, Z) + qp.g + np.einsum("nji,nj->ni", qp.D, mu)
        gradM = qp.HM @ xM + qp.gM
        if has_q:
            dq = xM - term.center
            jq = 2.0 * term.P @ dq
            r_cq = float(dq @ term.P @ dq) - term.level - s + t_q
            gradM = gradM + mu_q * jq
        r_cs = (-s + t_s) if relaxed else 0.0
        r_sd = (w - mu_q - mu_s) if relaxed else 0.0

        # full residuals for the convergence test
        stat = grad.copy()
        stat[:, :nx] += lam[:-1] - np.einsum("nji,nj->ni", qp.A, lam[1:])
        stat[:, nx:] -= np.einsum("nji,nj->ni", qp.B, lam[1:])
        statM = gradM + lam[-1]
        r_p = np.empty((M + 1, nx))
        r_p[0] = X[0] - qp.x_init
        r_p[1:] = X[1:] - np.einsum("nij,nj->ni", qp.A, X[:-1]) \
            - np.einsum("nij,nj->ni", qp.B, U) - qp.b
        comp = float(np.sum(t * mu) + t_q * mu_q + t_s * mu_s)
        gap = comp / m_total if m_total else 0.0
        # stop on the largest pairwise product; the average alone hides long horizons
        comp_max = float(max(np.max(t * mu, initial=0.0), t_q * mu_q, t_s * mu_s))
        res = {
            "stationarity": float(max(np.abs(stat).max(initial=0.0), np.abs(statM).max(),
                                      abs(r_sd))),
            "dynamics": float(np.abs(r_p).max()),
            "inequality": float(max(np.abs(r_c).max(initial=0.0),
                                    abs(r_cq) if has_q else 0.0, abs(r_cs))),
            "gap": gap,
            "complementarity": comp_max,
        }
        if (res["stationarity"] <= tol and res["dynamics"] <= tol
                and res["inequality"] <= tol and comp_max <= gap_tol):
            break
        if it == max_iter:
            break
        big = max(np.abs(mu).max(initial=0.0), mu_q, mu_s)
        if big > _DIVERGENCE * max(1.0, w):
            cert = np.concatenate([mu.ravel(), [mu_q] if has_q else []]) / big
            raise InfeasibleProblemError("inequality multipliers diverge; problem infeasible",
                                         certificate=cert)

        # reduced Hessians
        ratio = mu / t
        Ht = qp.H + np.einsum("nki,nk,nkj->nij", qp.D, ratio, qp.D)
        HMt = qp.HM.copy()
        if has_q:
            rq = mu_q / t_q
            HMt = HMt + 2.0 * mu_q * term.P + rq * np.outer(jq, jq)
            if relaxed:
                Hss = rq + mu_s / t_s
                Hxs = -rq * jq
                HMt = HMt - np.outer(Hxs, Hxs) / Hss
        try:
            ric = _Riccati(qp.A, qp.B, Ht, HMt, nx)
        except IllPosedError:
            # nearly active rows make mu/t huge; a breakdown this close to the
            # optimum is a stall, not an ill-posed problem
            if res["stationarity"] <= _STALL_TOL and res["inequality"] <= _STALL_TOL \
                    and comp_max <= 10 * gap_tol:
                stalled = True
                break
            raise

        def newton(rc_comp, rcq_comp, rcs_comp):
            corr = (mu * r_c - rc_comp) / t
            q = grad + np.einsum("nji,nj->ni", qp.D, corr)
            qM = gradM.copy()
            qs = 0.0
            if has_q:
                cq_corr = (mu_q * r_cq - rcq_comp) / t_q
                qM = qM + jq * cq_corr
                if relaxed:
                    qs = r_sd - cq_corr - (mu_s * r_cs - rcs_comp) / t_s
                    qM = qM - Hxs * qs / Hss
            dX, dU, lam_new = ric.solve(q, qM, -r_p[0], -r_p[1:])
            dZ = np.concatenate([dX[:-1], dU], axis=1)
            Ddz = np.einsum("nij,nj->ni", qp.D, dZ)
            dt = -r_c - Ddz
            dmu = (mu * Ddz + mu * r_c - rc_comp) / t
            ds = dtq = dmuq = dts = dmus = 0.0
            if has_q:
                if relaxed:
                    ds = -(qs + Hxs @ dX[-1]) / Hss
                jdx = float(jq @ dX[-1]) - ds
                dtq = -r_cq - jdx
                dmuq = (mu_q * jdx + mu_q * r_cq - rcq_comp) / t_q
                if relaxed:
                    dts = -r_cs + ds
                    dmus = (-mu_s * ds + mu_s * r_cs - rcs_comp) / t_s
            return dX, dU, lam_new, dt, dmu, ds, dtq, dmuq, dts, dmus

        def step_len(dt, dmu, dtq, dmuq, dts, dmus):
            a = min(_max_step(t.ravel(), dt.ravel()), _max_step(mu.ravel(), dmu.ravel()))
            if has_q:
                a = min(a, _max_step(np.array([t_q]), np.array([dtq])),
                        _max_step(np.array([mu_q]), np.array([dmuq])))
            if relaxed:
                a = min(a, _max_step(np.array([t_s]), np.array([dts])),
                        _max_step(np.array([mu_s]), np.array([dmus])))
            return a

        # predictor
        aff = newton(t * mu, t_q * mu_q, t_s * mu_s)
        _, _, _, dt_a, dmu_a, _, dtq_a, dmuq_a, dts_a, dmus_a = aff
        a_aff = step_len(dt_a, dmu_a, dtq_a, dmuq_a, dts_a, dmus_a)
        comp_aff = float(np.sum((t + a_aff * dt_a) * (mu + a_aff * dmu_a))
                         + (t_q + a_aff * dtq_a) * (mu_q + a_aff * dmuq_a)
                         + (t_s + a_aff * dts_a) * (mu_s + a_aff * dmus_a))
        sigma = (comp_aff / comp) ** 3 if comp > 0 else 0.0
        target = sigma * gap
        # corrector
        dX, dU, lam_new, dt, dmu, ds, dtq, dmuq, dts, dmus = newton(
            t * mu + dt_a * dmu_a - target,
            t_q * mu_q + dtq_a * dmuq_a - target,
            t_s * mu_s + dts_a * dmus_a - target)
        a = min(1.0, _STEP_TO_BOUNDARY * _unclipped_step(t, dt, mu, dmu, [(t_q, dtq), (mu_q, dmuq)]
                                                        if has_q else [],
                                                        [(t_s, dts), (mu_s, dmus)] if relaxed else []))
        X = X + a * dX
        U = U + a * dU
        lam = lam + a * (lam_new - lam)
        t = t + a * dt
        mu = mu + a * dmu
        if has_q:
            t_q += a * dtq
            mu_q += a * dmuq
        if relaxed:
            s += a * ds
            t_s += a * dts
            mu_s += a * dmus
    else:  # pragma: no cover - loop always breaks
        pass

    converged = stalled or (res["stationarity"] <= tol and res["dynamics"] <= tol
                            and res["inequality"] <= tol and comp_max <= gap_tol)
    result = QPResult(X=X, U=U, lam=lam, mu=mu, slack=float(s), mu_terminal=float(mu_q),
                      mu_slack=float(mu_s), objective=qp.objective(X, U, s),
                      iterations=it, gap=float(gap), residuals=res)
    if not converged:
        if res["inequality"] > 1e-6 and max(np.abs(mu).max(initial=0.0), mu_q) > 1e6:
            raise InfeasibleProblemError(
                f"no feasible point found after {it} iterations (residuals {res})")
        raise ConvergenceError(f"interior point did not converge in {max_iter} iterations "
                               f"(residuals {res})", best=result)
    return result
