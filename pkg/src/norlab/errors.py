"""Exception types shared across the package.

The CLI maps these onto exit codes (see ``norlab.cli``).
"""


class NorlabError(Exception):
    """Base class for all package errors."""


class ContractError(NorlabError, ValueError):
    """Shape mismatch or violated precondition on an argument."""


class DomainError(NorlabError, ValueError):
    """Argument outside the mathematical domain of a function."""


class CapacityError(NorlabError):
    """Problem too large for an exact (enumeration) routine."""


class ConfigError(NorlabError, ValueError):
    """Invalid or unknown configuration fields."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class NumericalAbort(NorlabError, FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceWarning(UserWarning):
    """An iterative solver hit its iteration cap before reaching tolerance."""
