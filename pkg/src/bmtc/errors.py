"""Exception hierarchy shared across the package."""


class BMTCError(Exception):
    """Base class for every error raised by this package."""


class ContractError(BMTCError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(BMTCError, ArithmeticError):
    """Non-finite values showed up where finite ones are required."""


class DegenerateMaskError(ContractError):
    """A foreground mask leaves no background pixel to work with."""


class CoverageError(ContractError):
    """Some category has no usable clip."""


class LengthError(ContractError):
    """Not enough source frames for the requested sampling policy."""


class NoCandidateError(ContractError):
    """Every background candidate was excluded."""


class TrainingError(BMTCError, RuntimeError):
    """Training diverged (loss or reward became NaN)."""


class CapabilityError(BMTCError, RuntimeError):
    """The model cannot provide what was asked of it (e.g. gradients)."""


class BlackBoxViolation(CapabilityError):
    """A gradient was requested through a target-role model handle."""


class AttackAborted(NumericError):
    """The attack loop hit a non-finite loss; ``trace`` holds the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
