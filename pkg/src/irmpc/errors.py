"""Exception hierarchy shared across the package."""


class IrmpcError(Exception):
    """Base class for all package errors."""


class DimensionError(IrmpcError, ValueError):
    """Input arrays do not match the declared model dimensions."""


class DomainError(IrmpcError, ValueError):
    """A reference was queried outside its time domain."""


class IllPosedError(IrmpcError):
    """A matrix that must be positive definite is not."""


class InfeasibleProblemError(IrmpcError):
    """The optimization problem has no feasible point.

    ``certificate`` holds the diverging inequality multipliers, normalized to unit
    max-norm, when the interior-point iteration detected infeasibility.
    """

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class ConvergenceError(IrmpcError):
    """An iterative method hit its iteration cap. ``best`` carries the last iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SynthesisError(IrmpcError):
    """Terminal ingredients could not be synthesized."""


class ContractError(IrmpcError, ValueError):
    """A data contract between modules was violated (missing fields, bad grids)."""
