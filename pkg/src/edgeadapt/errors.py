class EdgeAdaptError(Exception):
    """Base class for package errors."""


class ConfigError(EdgeAdaptError, ValueError):
    pass


class DataError(EdgeAdaptError, ValueError):
    pass


class ShapeError(EdgeAdaptError, ValueError):
    pass


class NumericError(EdgeAdaptError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


class CheckpointError(EdgeAdaptError):
    pass
