"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DisentangleError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(DisentangleError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor shape mismatch; ``dim`` names the offending dimension."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class DataError(DisentangleError):
    exit_code = 3


class NumericalError(DisentangleError, FloatingPointError):
    """Non-finite loss; ``layer`` is the first layer with a non-finite output."""

    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class GradientError(DisentangleError, RuntimeError):
    pass
