"""Exception types shared across the package."""


class EscapeGaugeError(Exception):
    """Base class for all package errors."""


class DomainError(EscapeGaugeError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class PoleProximity(DomainError):
    """Evaluation point is numerically indistinguishable from a pole."""

    def __init__(self, message, k=None, l=None):
        super().__init__(message)
        self.k = k
        self.l = l


class TruncationUnsafe(DomainError):
    """The truncated series cannot certify its tail at this point."""


class NoConvergence(EscapeGaugeError, ArithmeticError):
    """An iterative solver failed to meet its residual criterion."""


class InsufficientRange(EscapeGaugeError, ValueError):
    """Too few usable samples for a fit."""
