"""Exception types shared across the package."""


class SafeguideError(Exception):
    """Base class for all package errors."""


class DomainError(SafeguideError, ValueError):
    """Raised when a polar quantity is evaluated too close to the origin."""


class SingularSystem(SafeguideError, ArithmeticError):
    """Raised when the Lyapunov linear system cannot be solved."""


class UnsafeState(SafeguideError, ValueError):
    """Raised when a barrier is evaluated at a point with h <= 0."""


class Infeasible(SafeguideError, ArithmeticError):
    """Raised when no active set of the QP yields a KKT point."""


class SafetyViolation(SafeguideError):
    """Raised when a simulated trajectory leaves the safe set."""


class ConfigError(SafeguideError, ValueError):
    """Raised for malformed or invalid scenario files."""
