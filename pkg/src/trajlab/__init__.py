"""Trajectory forecasting lab: scene rasters, a multi-backbone fusion network, losses, metrics."""

from trajlab.errors import ConfigurationError, DegenerateAngleError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DegenerateAngleError", "NumericalError", "__version__"]
