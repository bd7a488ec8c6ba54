"""Tracking MPC with dynamics-infeasible references for LTV systems."""
from .errors import (ContractError, ConvergenceError, DimensionError, DomainError, IllPosedError,
                     InfeasibleProblemError, IrmpcError, SynthesisError)
from .ltv import (ConstraintSet, LtvModel, TimeGrid, affine_constraints, box_constraints,
                  check_feasible, no_constraints, rollout, step)
from .mpc import MpcConfig, MpcController, ideal_step, practical_step, rotated_ideal_step
from .ocp import (OcpProblem, OcpSolution, QuadraticStageCost, TerminalMode, kkt_residuals,
                  solve, solve_qp, solve_reference_ocp, solve_sqp)
from .reference import (FunctionReference, PathReference, TabulatedReference, infeasibility_profile,
                        robot_reference)
from .robot import RobotBench, RobotBenchConfig
from .rotation import (RotatedCost, RotationData, check_positivity, telescoping_identity_check,
                       verify_primal_invariance)
from .simulator import ClosedLoopTrace, evaluate_iss, run_closed_loop, verify_decrease
from .terminal import (TerminalIngredients, lqr_synthesis, max_feasible_level,
                       validate_terminal_conditions)

__all__ = [
    'ContractError', 'ConvergenceError', 'DimensionError', 'DomainError', 'IllPosedError',
    'InfeasibleProblemError', 'IrmpcError', 'SynthesisError', 'ConstraintSet', 'LtvModel',
    'TimeGrid', 'affine_constraints', 'box_constraints', 'check_feasible', 'no_constraints',
    'rollout', 'step', 'MpcConfig', 'MpcController', 'ideal_step', 'practical_step',
    'rotated_ideal_step', 'OcpProblem', 'OcpSolution', 'QuadraticStageCost', 'TerminalMode',
    'kkt_residuals', 'solve', 'solve_qp', 'solve_reference_ocp', 'solve_sqp', 'FunctionReference',
    'PathReference', 'TabulatedReference', 'infeasibility_profile', 'robot_reference',
    'RobotBench', 'RobotBenchConfig', 'RotatedCost', 'RotationData', 'check_positivity',
    'telescoping_identity_check', 'verify_primal_invariance', 'ClosedLoopTrace', 'evaluate_iss',
    'run_closed_loop', 'verify_decrease', 'TerminalIngredients', 'lqr_synthesis',
    'max_feasible_level', 'validate_terminal_conditions',
]

__version__ = "0.1.0"
