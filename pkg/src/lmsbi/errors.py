"""Exception hierarchy. Each class maps onto one CLI exit code."""


class LmsbiError(Exception):
    exit_code = 4


class ValidationError(LmsbiError, ValueError):
    """An input violates a documented invariant."""

    exit_code = 3


class NumericError(LmsbiError, ArithmeticError):
    """Non-finite values, overflow, or a degenerate numerical state."""

    exit_code = 4


class ResourceError(LmsbiError):
    """A run was refused because it would exceed a resource budget."""

    exit_code = 5

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate
