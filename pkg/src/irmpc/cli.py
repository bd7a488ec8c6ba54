"""Command-line front end.

    irmpc solve-ocp [robot2dof] --config cfg.json --out results/
    irmpc run robot2dof --mode both --steps 300
    irmpc verify
    irmpc synthesize-terminal --seed 0
    irmpc export-reference

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(including a failed verification check).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (ContractError, ConvergenceError, IllPosedError, InfeasibleProblemError,
                     IrmpcError, SynthesisError)
from .ltv import TimeGrid, rollout
from .mpc import MpcConfig, MpcController
from .ocp import OcpProblem, solve_reference_ocp
from .reference import discontinuity_steps, infeasibility_profile, sample
from .robot import BENCH_NAME, RobotBench, RobotBenchConfig
from .rotation import (RotatedCost, RotationData, check_positivity, hessian_check,
                       telescoping_identity_check, verify_primal_invariance)
from .simulator import evaluate_iss, run_closed_loop, verify_decrease
from .terminal import max_feasible_level, validate_terminal_conditions

log = logging.getLogger("irmpc")

CONTROLLER_MODES = ("practical", "ideal", "both")
REFERENCES = ("path", "feasible")
TELESCOPING_TOL = 1e-9
INVARIANCE_TOL = 1e-6
ROTATED_PRIMAL_TOL = 1e-6
HESSIAN_TOL = 1e-4
INVARIANCE_HORIZON = 100
TELESCOPING_HORIZON = 50
N_ROLLOUTS = 20


class UsageError(Exception):
    """Bad command line or configuration (exit code 1)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``bench`` holds further bench parameters by name.

    ``lambda_scale`` multiplies the reference multipliers before any check and
    ``reference`` selects the path reference or its dynamically feasible variant.
    """

    bench_name: str = BENCH_NAME
    mode: str = "both"
    N: Optional[int] = None
    M: Optional[int] = None
    t_s: Optional[float] = None
    steps: Optional[int] = None
    seed: int = 0
    out: str = "."
    reference: str = "path"
    lambda_scale: float = 1.0
    bench: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bench_name != BENCH_NAME:
            raise UsageError(f"unknown bench {self.bench_name!r} (only {BENCH_NAME!r})")
        if self.mode not in CONTROLLER_MODES:
            raise UsageError(f"mode must be one of {CONTROLLER_MODES}")
        if self.reference not in REFERENCES:
            raise UsageError(f"reference must be one of {REFERENCES}")
        if self.steps is not None and self.steps < 1:
            raise UsageError("steps must be at least 1 (an empty trace has nothing to certify)")
        if not np.isfinite(self.lambda_scale):
            raise UsageError("lambda_scale must be finite")
        try:
            self.bench_config()
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid bench parameters: {exc}") from None

    def bench_config(self) -> RobotBenchConfig:
        over = dict(self.bench)
        for key in ("N", "M", "t_s", "steps"):
            if getattr(self, key) is not None:
                over[key] = getattr(self, key)
        return RobotBenchConfig.from_dict(over)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise UsageError("configuration must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
        if "bench" in d and not isinstance(d["bench"], dict):
            raise UsageError("'bench' must be an object")
        try:
            return cls(**d)
        except TypeError as exc:
            raise UsageError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed configuration: {exc}") from None
        return cls.from_dict(d)


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _bench(cfg: ExperimentConfig) -> RobotBench:
    bench = RobotBench(cfg.bench_config())
    if cfg.reference == "feasible":
        bench = bench.feasible_variant()
    return bench


def _rotation(cfg: ExperimentConfig, bench: RobotBench) -> RotationData:
    rot = bench.rotation()
    return rot if cfg.lambda_scale == 1.0 else rot.scaled(cfg.lambda_scale)


def cmd_solve_ocp(cfg: ExperimentConfig) -> int:
    bench = _bench(cfg)
    sol = bench.reference_ocp()
    nx, nu, nh = sol.states.shape[1], sol.inputs.shape[1], bench.constraints.n_h
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
               + [f"lam{i}" for i in range(nx)] + [f"mu{j}" for j in range(nh)])
    for i, k in enumerate(sol.grid.steps):
        last = i == len(sol.inputs)
        u = np.full(nu, np.nan) if last else sol.inputs[i]
        mu = np.full(nh, np.nan) if last else sol.mu[i]
        w.writerow([int(k)] + [_fmt(v) for v in (sol.grid.t(k), *sol.states[i], *u, *sol.lam[i], *mu)])
    out = Path(cfg.out)
    _write(out, "reference_solution.csv", buf.getvalue())
    summary = {"M": bench.cfg.M, "iterations": sol.iterations, "kkt_residual": sol.kkt_residual,
               "objective": sol.objective, "max_abs_lambda": float(np.abs(sol.lam).max()),
               "max_abs_mu": float(np.abs(sol.mu).max(initial=0.0))}
    _write(out, "ocp_summary.json", _dump(summary))
    log.info("reference OCP solved: %d iterations, KKT %.2e", sol.iterations, sol.kkt_residual)
    return 0


def cmd_run(cfg: ExperimentConfig) -> int:
    bench = _bench(cfg)
    rot = _rotation(cfg, bench)
    modes = ("practical", "ideal") if cfg.mode == "both" else (cfg.mode,)
    out = Path(cfg.out)
    cert = {}
    failed = False
    for mode in modes:
        ctrl = MpcController(MpcConfig.for_bench(bench, mode), rot)
        tr = run_closed_loop(bench.model, ctrl, bench.reference, bench.x0, bench.cfg.k0,
                             bench.cfg.steps)
        if tr.steps == 0:
            raise UsageError("empty trace")
        _write(out, f"trace_{mode}.csv", tr.to_csv())
        entry = {"steps": tr.steps, "failure": tr.failure,
                 "final_err_r": float(tr.err_r[-1]), "final_err_yr": float(tr.err_yr[-1]),
                 "max_slack": float(tr.slack.max())}
        if tr.failure is None:
            dec = verify_decrease(tr, "ideal")
            entry["decrease"] = {"worst_violation": dec.worst_violation, "worst_step": dec.worst_step,
                                 "passed": dec.passed}
            if mode == "practical":
                entry["iss"] = evaluate_iss(tr, rot).as_dict()
            else:
                entry["rotated_primal_max_dev"] = float(np.nanmax(tr.rotated_primal_dev))
        failed |= tr.failure is not None
        cert[mode] = entry
    _write(out, "certificate.json", _dump(cert))
    return 2 if failed else 0


def _telescoping(bench, rot, rng):
    """Worst relative telescoping discrepancy over random dynamically feasible rollouts."""
    worst = 0.0
    n = TELESCOPING_HORIZON
    k_hi = rot.grid.k0 + len(rot.inputs) - n
    for _ in range(N_ROLLOUTS):
        k = int(rng.integers(rot.grid.k0, k_hi + 1))
        x_init = rot.x_r(k) + rng.normal(scale=0.1, size=rot.states.shape[1])
        U = np.array([rot.u_r(k + i) for i in range(n)]) + rng.normal(scale=0.1, size=(n, rot.inputs.shape[1]))
        X = rollout(bench.model, k, x_init, U)
        prob = OcpProblem(bench.model, bench.cost, bench.constraints,
                          TimeGrid(k, bench.grid.t(k), n + 1, bench.cfg.t_s), x_init, n)
        gap = telescoping_identity_check(prob, rot, X, U)
        scale = 1.0 + abs(prob.objective(X, U))
        worst = max(worst, gap / scale)
    return worst


def _invariance(bench, cfg):
    """Primal invariance and multiplier collapse on a truncated reference OCP."""
    n = INVARIANCE_HORIZON
    grid = TimeGrid(0, 0.0, n + 1, bench.cfg.t_s)
    x_init = bench.reference.r_x(0.0)
    sol = solve_reference_ocp(bench.model, bench.cost, bench.constraints, bench.reference, grid,
                              x_init, n, check_tail=False)
    rot = RotationData.from_solution(sol, bench.model)
    if cfg.lambda_scale != 1.0:
        rot = rot.scaled(cfg.lambda_scale)
    prob = OcpProblem(bench.model, bench.cost, bench.constraints, grid, x_init, n)
    return verify_primal_invariance(prob, rot, INVARIANCE_TOL)


def cmd_verify(cfg: ExperimentConfig) -> int:
    bench = _bench(cfg)
    rot = _rotation(cfg, bench)
    rng = np.random.default_rng(cfg.seed)
    checks = {}

    tel = _telescoping(bench, rot, rng)
    checks["telescoping"] = {"worst_relative": tel, "passed": tel <= TELESCOPING_TOL}

    inv = _invariance(bench, cfg)
    lam_ok = inv.lam_bar_max <= INVARIANCE_TOL * max(1.0, float(np.abs(inv.original.lam).max()))
    checks["primal_invariance"] = {"primal_deviation": inv.primal_deviation,
                                   "lam_bar_max": inv.lam_bar_max,
                                   "mu_bar_deviation": inv.mu_bar_deviation,
                                   "passed": bool(inv.passed and lam_ok)}

    rc = RotatedCost(bench.cost, rot, terminal="ytilde")
    pos = check_positivity(rc, bench.constraints, seed=cfg.seed)
    checks["positivity"] = {"samples": pos.n_samples, "violations": pos.violations,
                            "min_margin": pos.min_margin, "passed": pos.passed}
    hess = max(hessian_check(rc, k) for k in rng.choice(rot.grid.steps[:-1], size=5))
    checks["hessian"] = {"max_error": hess, "passed": hess <= HESSIAN_TOL}

    ti = bench.terminal("yr")
    term = validate_terminal_conditions(ti, bench.model, rc, bench.constraints, rot.grid,
                                        seed=cfg.seed)
    checks["terminal"] = {**term.as_dict(), "passed": term.passed}

    ctrl = MpcController(MpcConfig.for_bench(bench, "ideal"), rot)
    tr = run_closed_loop(bench.model, ctrl, bench.reference, bench.x0, bench.cfg.k0, bench.cfg.steps)
    dev = float(np.nanmax(tr.rotated_primal_dev)) if tr.steps else 0.0
    checks["rotated_primal"] = {"steps": tr.steps, "max_deviation": dev,
                        "passed": tr.failure is None and dev <= ROTATED_PRIMAL_TOL}

    ok = all(c["passed"] for c in checks.values())
    for name, c in checks.items():
        print(f"{name}: {'PASS' if c['passed'] else 'FAIL'}")
    _write(Path(cfg.out), "verify.json", _dump({"passed": ok, "checks": checks}))
    return 0 if ok else 2


def cmd_synthesize_terminal(cfg: ExperimentConfig) -> int:
    bench = _bench(cfg)
    rot = _rotation(cfg, bench)
    rc = RotatedCost(bench.cost, rot, terminal="ytilde")
    ti = bench.terminal("yr")
    alpha = max_feasible_level(ti, bench.model, rc, bench.constraints, rot.grid, seed=cfg.seed)
    rep = validate_terminal_conditions(ti, bench.model, rc, bench.constraints, rot.grid,
                                       seed=cfg.seed)
    res = {"P": bench.P, "K": bench.K, "max_feasible_level": alpha,
           "configured_level": bench.cfg.terminal_level, "configured_report": rep.as_dict()}
    _write(Path(cfg.out), "terminal.json", _dump(res))
    print(f"max feasible level {alpha:.6g}")
    return 0


def cmd_export_reference(cfg: ExperimentConfig) -> int:
    bench = _bench(cfg)
    grid = bench.grid
    rx, ru = sample(bench.reference, grid)
    eps = infeasibility_profile(bench.reference, bench.model, grid)
    jumps = set(discontinuity_steps(bench.reference, grid))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"rx{i}" for i in range(rx.shape[1])] + [f"ru{i}" for i in range(ru.shape[1])]
               + ["eps_k", "discontinuity"])
    for i, k in enumerate(grid.steps):
        e = eps[i] if i < len(eps) else np.nan
        w.writerow([_fmt(v) for v in (grid.t(k), *rx[i], *ru[i], e)] + [int(k in jumps)])
    _write(Path(cfg.out), "reference.csv", buf.getvalue())
    return 0


COMMANDS = {"solve-ocp": cmd_solve_ocp, "run": cmd_run, "verify": cmd_verify,
            "synthesize-terminal": cmd_synthesize_terminal, "export-reference": cmd_export_reference}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="irmpc", description="Tracking MPC with infeasible references.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("bench", nargs="?", default=None, help=f"bench name ({BENCH_NAME})")
        s.add_argument("--config", help="JSON experiment configuration")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--mode", choices=CONTROLLER_MODES)
    return p


def load_config(args) -> ExperimentConfig:
    d = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read configuration: {exc}") from None
        d = ExperimentConfig.from_json(text).to_dict()
    if args.bench is not None:
        d["bench_name"] = args.bench
    for key in ("out", "seed", "steps", "mode"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"irmpc: error: {exc}", file=sys.stderr)
        return 1
    except (InfeasibleProblemError, ConvergenceError, IllPosedError, SynthesisError) as exc:
        print(f"irmpc: numerical failure: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"irmpc: error: {exc}", file=sys.stderr)
        return 1
    except IrmpcError as exc:
        print(f"irmpc: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
