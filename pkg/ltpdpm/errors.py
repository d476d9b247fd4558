"""Exception types raised across the ltpdpm package."""

from typing import Optional


class LtpDpmError(Exception):
    """Base class for every computation error raised by the package."""
    pass


class ParseError(LtpDpmError, ValueError):
    """Raised when an input file cannot be parsed.

    The offending row (1-based, header excluded) is attached when known.
    """

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ShapeError(LtpDpmError, ValueError):
    """Raised when array dimensions are inconsistent with the model layout."""
    pass


class DegeneracyError(LtpDpmError, ValueError):
    """Raised when an input has no variation where variation is required."""
    pass


class SingularityError(LtpDpmError, ArithmeticError):
    """Raised when a Gram or dispersion matrix cannot be factorized."""

    def __init__(self, matrix_name: str, detail: str = ""):
        self.matrix_name = matrix_name
        message = f"matrix {matrix_name} is singular or not positive definite"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class CoverageError(LtpDpmError, ValueError):
    """Raised when the covariate series does not cover a requested year."""
    pass


class SamplerError(LtpDpmError, RuntimeError):
    """Raised when a Gibbs block fails numerically."""

    def __init__(self, iteration: int, block: str, detail: str):
        self.iteration = iteration
        self.block = block
        super().__init__(f"iteration {iteration}, block {block}: {detail}")


class UndefinedRegionError(LtpDpmError):
    """Raised when no predictive draw exceeds the hotspot threshold anywhere."""
    pass


class UndefinedSkillError(LtpDpmError, ZeroDivisionError):
    """Raised when a skill score is requested against a zero benchmark score."""
    pass


class ConfigError(LtpDpmError, ValueError):
    """Raised for unreadable or invalid run configurations."""
    pass
