"""Exception hierarchy shared by the solver modules and the CLI.

Three families map onto distinct process exit codes:

- ``ValidationError``: the inputs describe a model, kernel or configuration
  the solver refuses to run.
- ``NumericalError``: a computation produced non-finite or runaway values.
- ``NoConvergence``: an iteration stopped before reaching its tolerance.
"""

from typing import Optional, Sequence


EXIT_OK = 0
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4
EXIT_NO_CONVERGENCE = 5


class BspdeError(Exception):
    """Base class for every error raised by bspde_mc."""

    exit_code = 1


class ValidationError(BspdeError, ValueError):
    """Inputs violate a structural condition; nothing was simulated."""

    exit_code = EXIT_VALIDATION


class NumericalError(BspdeError, ArithmeticError):
    """A numerical procedure failed while running."""

    exit_code = EXIT_NUMERICAL


class NoConvergence(BspdeError):
    """Fixed-point iteration exhausted its budget above tolerance."""

    exit_code = EXIT_NO_CONVERGENCE

    def __init__(
        self,
        message: str,
        residual_history: Sequence[float] = (),
        noise_floor: Optional[float] = None,
    ):
        super().__init__(message)
        self.residual_history = list(residual_history)
        self.noise_floor = noise_floor


class EvaluationError(ValidationError):
    """A coefficient or expression failed to evaluate at a point."""


class NotPSD(ValidationError):
    """The diffusion remainder 2b - sum(beta beta^T) has a negative eigenvalue."""


class NotElliptic(ValidationError):
    """The diffusion coefficient dropped below the ellipticity floor."""


class InvalidTerminal(ValidationError):
    """Terminal data does not vanish on the boundary."""


class InvalidKernel(ValidationError):
    """A terminal kernel is malformed or lies outside the contraction regimes."""


class CondLViolated(ValidationError):
    """The discount can expand somewhere, so the non-local map is not a contraction."""


class ZetaBoundaryViolation(ValidationError):
    """The terminal target is inconsistent with the barrier wealths."""


class KernelBudgetExceeded(ValidationError):
    """The dividend/fee kernels integrate to more than the allowed budget."""


class DimensionMismatch(ValidationError):
    """Two models or arrays disagree on a dimension that must match."""


class GridMismatch(ValidationError):
    """A field does not cover the grid it is asked to be compared on."""


class SupportOutsideGrid(ValidationError):
    """A kernel reads times the field grid does not cover."""


class InterpolationOutOfRange(ValidationError):
    """A query point lies outside the hull of a field grid."""


class FieldOutOfRange(ValidationError):
    """A hedge field does not cover the barrier corridor."""


class ConfigError(ValidationError):
    """A run configuration is missing keys or has wrong types."""


class ExpressionSyntaxError(ValidationError):
    """An expression could not be parsed.

    Attributes:
        offset: byte offset into the source where parsing failed.
    """

    def __init__(self, offset: int, message: str):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.reason = message


class UnknownIdentifier(ExpressionSyntaxError):
    """An expression names a variable, constant or function that is not bound."""


class NumericalBlowup(NumericalError):
    """A simulated path escaped the configured bound."""

    def __init__(self, message: str, path_index: int):
        super().__init__(f"{message} (path {path_index})")
        self.path_index = path_index


class Instability(NumericalError):
    """A deterministic scheme produced non-finite values."""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, BspdeError):
        return error.exit_code
    return 1
