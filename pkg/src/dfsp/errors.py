"""Exception types shared across the package."""


class InvariantError(ValueError):
    """A structural contract was violated: bad shapes, indices, splits, or files."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or lost numerical meaning."""
