"""Exception types shared across the package."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""
