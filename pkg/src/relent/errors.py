"""Exception hierarchy.

Numerical failures (positivity, divergence) are kept apart from usage errors
so that the command line can map them onto distinct exit codes.
"""


class RelentError(Exception):
    """Base class for all errors raised by the package."""


class UsageError(RelentError, ValueError):
    """Wrong argument shape, rank or range."""


class UnsupportedDimensionError(UsageError):
    pass


class ConfigError(UsageError):
    pass


class NumericalError(RelentError):
    """A run left the admissible state space."""

    def __init__(self, message, *, t=None, index=None, step=None):
        super().__init__(message)
        self.t = t
        self.index = index
        self.step = step


class PositivityError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class VacuumError(NumericalError):
    """Nonzero momentum or forcing on a cell with zero density."""


class ReferencePositivityError(UsageError):
    pass


class ReferenceBoundError(UsageError):
    pass


class CoercivityError(RelentError):
    pass


class CouplingError(RelentError):
    pass


class ReductionError(RelentError):
    pass


class StoppingTimeError(RelentError):
    """The reference gradient bound was exceeded too early for a meaningful comparison."""

    def __init__(self, message, *, tau=None):
        super().__init__(message)
        self.tau = tau
