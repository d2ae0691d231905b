"""Exception types raised by discnet."""


class DataValidationError(ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (degenerate curvature, divergence, ...)."""
