"""Closed-loop simulation with Lyapunov and ISS certificate evaluation.

Along a run the rotated ideal value function Vbar_i is evaluated at every visited
state by a separate rotated-ideal solve, so the certificate terms are available
whatever controller drives the loop.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import ContractError, IrmpcError
from .ltv import LtvModel
from .mpc import MpcController, rotated_cost_of_trajectory
from .reference import ReferenceTrajectory
from .rotation import RotationData

log = logging.getLogger(__name__)

IDEAL_DECREASE_TOL = 1e-7
ISS_TOL = 1e-6
GAP_ZERO_TOL = 1e-7


@dataclass
class ClosedLoopTrace:
    """Per-step record; arrays of length ``steps`` except ``states``/``Vbar_i`` (+1)."""

    mode: str
    k: np.ndarray
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    V: np.ndarray
    V_i: np.ndarray
    Vbar_i: np.ndarray
    Jbar_star: np.ndarray
    err_r: np.ndarray
    err_yr: np.ndarray
    slack: np.ndarray
    d: np.ndarray
    rotated_primal_dev: np.ndarray
    alpha3: np.ndarray
    lambda_min_W: float = 0.0
    failure: Optional[str] = None
    stats: List[dict] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def decrease_resid(self) -> np.ndarray:
        """Vbar_i(x_{k+1}) - Vbar_i(x_k) + alpha3(e_k)."""
        return self.Vbar_i[1:self.steps + 1] - self.Vbar_i[:self.steps] + self.alpha3

    @property
    def iss_resid(self) -> np.ndarray:
        """Vbar_i(x_{k+1}) - Jbar_star(x_k) + alpha3(e_k)."""
        return self.Vbar_i[1:self.steps + 1] - self.Jbar_star + self.alpha3

    def dynamics_residual(self, model: LtvModel) -> float:
        if self.steps == 0:
            return 0.0
        return float(max(np.abs(self.states[i + 1] - model.f(self.k[i], self.states[i], self.inputs[i])).max()
                         for i in range(self.steps)))

    CSV_FIELDS = ("k", "t", "x", "u", "err_r", "err_yr", "V", "Vbar_i", "Jbar_star", "slack",
                  "decrease_resid")

    def to_csv(self) -> str:
        nx, nu = self.states.shape[1], self.inputs.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
                   + ["err_r", "err_yr", "V", "Vbar_i", "Jbar_star", "slack", "decrease_resid"])
        dec = self.decrease_resid
        for i in range(self.steps):
            row = [int(self.k[i]), self.t[i], *self.states[i], *self.inputs[i], self.err_r[i],
                   self.err_yr[i], self.V[i], self.Vbar_i[i], self.Jbar_star[i], self.slack[i], dec[i]]
            w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])
        return buf.getvalue()


def run_closed_loop(model: LtvModel, controller: MpcController, ref: ReferenceTrajectory,
                    x0, k0: int, steps: int, monitor: bool = True) -> ClosedLoopTrace:
    """Apply the controller for ``steps`` steps from (x0, k0) on the model itself.

    With ``monitor`` and rotation data available, a rotated-ideal controller
    evaluates Vbar_i at every state (including the last one). A solver failure
    ends the run early; the trace then carries a ``failure`` message.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    cfg = controller.cfg
    rot: Optional[RotationData] = controller.rot
    lmin = float(np.linalg.eigvalsh(cfg.cost.W).min())
    mon = None
    if monitor and rot is not None:
        mon = MpcController(cfg.with_mode("rotated"), rot)
    x = np.asarray(x0, float).copy()
    rec = {key: [] for key in ("k", "t", "x", "u", "V", "V_i", "Vbar_i", "Jbar", "err_r",
                               "err_yr", "slack", "d", "pdev", "a3")}
    stats = []
    failure = None

    def monitor_at(x, k):
        if mon is None:
            return np.nan, np.nan, None
        if mon.penalty_weight is None and controller.penalty_weight is not None:
            mon.penalty_weight = controller.penalty_weight
        r = mon.step(x, k)
        # ideal value on the same primal (the two problems share it)
        vi = float(sum(controller._ideal.stage(r.predicted_states[n], r.predicted_inputs[n], k + n,
                                               cfg.t(k + n)) for n in range(cfg.N))
                   + controller._ideal.terminal(r.predicted_states[-1], k + cfg.N, cfg.t(k + cfg.N)))
        if r.terminal_slack > 0:
            vi += mon.penalty_weight * r.terminal_slack
        return r.value, vi, r

    for i in range(steps + 1):
        k = k0 + i
        t = cfg.t(k)
        rec["x"].append(x.copy())
        rec["k"].append(k)
        rec["t"].append(t)
        try:
            vbar, vi, mres = monitor_at(x, k)
        except IrmpcError as exc:
            failure = f"monitor solve failed at step {k}: {exc}"
            rec["Vbar_i"].append(np.nan)
            break
        rec["Vbar_i"].append(vbar)
        if i == steps:
            break
        try:
            res = controller.step(x, k)
        except IrmpcError as exc:
            failure = f"controller solve failed at step {k}: {exc}"
            break
        u = res.u_apply
        rec["u"].append(u)
        rec["V"].append(res.value)
        rec["V_i"].append(vi)
        rec["slack"].append(res.terminal_slack)
        rec["err_r"].append(float(np.linalg.norm(x - ref.r_x(t))))
        if rot is not None:
            e = x - rot.x_r(k)
            rec["err_yr"].append(float(np.linalg.norm(e)))
            rec["a3"].append(lmin * float(e @ e))
            if cfg.mode == "rotated":
                jbar = res.value
            else:
                jbar = rotated_cost_of_trajectory(controller.rotated, res.predicted_states,
                                                  res.predicted_inputs, "ytilde", k)
            rec["Jbar"].append(jbar)
            kN = k + cfg.N
            if cfg.mode == "practical":
                tN = cfg.t(kN)
                yf = np.concatenate([ref.r_x(tN), ref.r_u(tN)])
                yr = np.concatenate([rot.x_r(kN), rot.inputs[min(kN - rot.grid.k0, len(rot.inputs) - 1)]])
                rec["d"].append(float(np.linalg.norm(yf - yr)))
            else:
                rec["d"].append(0.0)
            if mres is not None:
                rec["pdev"].append(float(max(np.abs(res.predicted_states - mres.predicted_states).max(),
                                           np.abs(res.predicted_inputs - mres.predicted_inputs).max())))
            else:
                rec["pdev"].append(np.nan)
        else:
            for key in ("err_yr", "a3", "Jbar", "d", "pdev"):
                rec[key].append(np.nan)
        stats.append(res.solver_stats)
        x = model.f(k, x, u)
    n = len(rec["u"])
    nx, nu = model.n_x, model.n_u
    states = np.array(rec["x"]).reshape(-1, nx)[: n + 1]
    return ClosedLoopTrace(
        mode=cfg.mode, k=np.array(rec["k"][:n], dtype=int), t=np.array(rec["t"][:n]),
        states=states, inputs=np.array(rec["u"]).reshape(n, nu), V=np.array(rec["V"]),
        V_i=np.array(rec["V_i"]), Vbar_i=np.array(rec["Vbar_i"] + [np.nan] * (n + 1 - len(rec["Vbar_i"])))[: n + 1],
        Jbar_star=np.array(rec["Jbar"]), err_r=np.array(rec["err_r"]), err_yr=np.array(rec["err_yr"]),
        slack=np.array(rec["slack"]), d=np.array(rec["d"]), rotated_primal_dev=np.array(rec["pdev"]),
        alpha3=np.array(rec["a3"]), lambda_min_W=lmin, failure=failure, stats=stats)


@dataclass
class DecreaseReport:
    mode: str
    worst_violation: float
    worst_step: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_violation <= self.tolerance


def verify_decrease(trace: ClosedLoopTrace, mode: str = "ideal",
                    tol: float = IDEAL_DECREASE_TOL) -> DecreaseReport:
    """Lyapunov decrease with alpha3 = lambda_min(W) ||e||^2.

    ``ideal`` uses Vbar_i and the error to x^r; ``nominal`` uses the controller's
    own value V and the error to r (meaningful when r is dynamically feasible).
    """
    if mode not in ("ideal", "nominal"):
        raise ValueError("mode must be 'ideal' or 'nominal'")
    if trace.steps == 0:
        return DecreaseReport(mode, 0.0, -1, tol)
    if mode == "ideal":
        resid = trace.decrease_resid
    else:
        if trace.steps < 2:
            return DecreaseReport(mode, 0.0, -1, tol)
        resid = trace.V[1:] - trace.V[:-1] + trace.lambda_min_W * trace.err_r[:-1] ** 2
    if np.any(np.isnan(resid)):
        raise ContractError("trace lacks the value functions needed for the decrease check")
    i = int(np.argmax(resid))
    return DecreaseReport(mode, float(resid[i]), int(trace.k[i]), tol)


@dataclass
class IssCertificate:
    lhs: np.ndarray
    decay: np.ndarray
    iss_resid: np.ndarray
    gaps: np.ndarray
    d: np.ndarray
    c1: float
    c2: float
    covers: bool
    monotone: bool
    iss_slack_max: float
    gap_at_zero_max: float

    def sigma_hat(self, d):
        d = np.asarray(d, float)
        return self.c1 * d + self.c2 * d * d

    @property
    def iss_ok(self) -> bool:
        return self.iss_slack_max <= ISS_TOL

    def as_dict(self):
        return {"iss_slack_max": self.iss_slack_max, "iss": "PASS" if self.iss_ok else "FAIL",
                "sigma_c1": self.c1, "sigma_c2": self.c2, "sigma_covers": self.covers,
                "sigma_monotone": self.monotone, "gap_at_zero_max": self.gap_at_zero_max,
                "max_d": float(self.d.max(initial=0.0)), "max_gap": float(self.gaps.max(initial=0.0))}


def fit_sigma(d, g, tol: float = GAP_ZERO_TOL):
    """Smallest envelope c1 d + c2 d^2 (c >= 0) with sigma(d_k) >= g_k - tol.

    "Smallest" means least area on [0, max d]; solved as a two-variable LP.
    Returns (c1, c2, feasible).
    """
    d = np.asarray(d, float)
    g = np.asarray(g, float)
    need = g > tol
    if not np.any(need):
        return 0.0, 0.0, True
    if np.any(need & (d <= 0.0)):
        return 0.0, 0.0, False
    dm = float(d.max())
    A = -np.column_stack([d[need], d[need] ** 2])
    b = -(g[need] - tol)
    res = linprog([dm ** 2 / 2, dm ** 3 / 3], A_ub=A, b_ub=b, bounds=[(0, None), (0, None)],
                  method="highs")
    if not res.success:
        return 0.0, 0.0, False
    c1, c2 = (float(v) for v in res.x)
    ok = bool(np.all(c1 * d + c2 * d * d >= g - tol - 1e-12 * np.maximum(1.0, np.abs(g))))
    return c1, c2, ok


def evaluate_iss(trace: ClosedLoopTrace, rot: Optional[RotationData] = None) -> IssCertificate:
    """Both inequality chains of the ISS argument along a (practical) trace.

    (i)  Vbar_i(x_{k+1}) <= Jbar_star(x_k) - alpha3(e_k)
    (ii) g_k = Jbar_star(x_k) - Vbar_i(x_k) against d_k = ||y^f_{k+N} - y^r_{k+N}||
    """
    n = trace.steps
    for name in ("Jbar_star", "alpha3", "d"):
        if len(getattr(trace, name)) != n or np.any(np.isnan(getattr(trace, name))):
            raise ContractError(f"trace field {name} missing; run with rotation data")
    if np.any(np.isnan(trace.Vbar_i[:n + 1])):
        raise ContractError("trace lacks Vbar_i values")
    lhs = trace.Vbar_i[1:n + 1] - trace.Vbar_i[:n]
    iss = trace.iss_resid
    gaps = trace.Jbar_star - trace.Vbar_i[:n]
    c1, c2, covers = fit_sigma(trace.d, gaps)
    grid = np.linspace(0.0, float(trace.d.max(initial=0.0)), 201)
    sig = c1 * grid + c2 * grid ** 2
    zero = trace.d <= 0.0
    return IssCertificate(
        lhs=lhs, decay=trace.alpha3, iss_resid=iss, gaps=gaps, d=trace.d, c1=c1, c2=c2,
        covers=covers, monotone=bool(np.all(np.diff(sig) >= 0.0)),
        iss_slack_max=float(iss.max(initial=-np.inf)),
        gap_at_zero_max=float(gaps[zero].max(initial=0.0)))
