class ConfigurationError(ValueError):
    """Raised for invalid configs or shape mismatches between config and data."""


class NumericalError(ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


class DegenerateAngleError(ValueError):
    """Raised when a final point is too close to the origin to define a direction."""
