"""Exception types shared across the package."""


class SegDetectError(Exception):
    """Base class for all package errors."""


class ShapeError(SegDetectError, ValueError):
    """Operand shapes are incompatible."""


class FormatError(SegDetectError, ValueError):
    """A persisted file is corrupt, truncated or of the wrong kind."""


class NumericError(SegDetectError, ArithmeticError):
    """A numeric procedure diverged or failed to converge."""


class ConfigError(SegDetectError, ValueError):
    """An experiment configuration is invalid or inconsistent."""
