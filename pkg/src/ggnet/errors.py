"""Exception hierarchy; the CLI maps each family to its own exit code."""


class GGNetError(Exception):
    pass


class ShapeError(GGNetError, ValueError):
    """Operand extents do not agree."""


class ConfigError(GGNetError, ValueError):
    """Invalid configuration value or layer geometry."""


class DataError(GGNetError):
    """Dataset files are missing, malformed or inconsistent."""


class NumericalError(GGNetError, FloatingPointError):
    """A loss or parameter became non-finite."""


class UndefinedMetricError(GGNetError, ValueError):
    """A distance metric was requested on an empty mask."""


class FormatError(DataError):
    """An image file is not 8-bit single-channel."""
