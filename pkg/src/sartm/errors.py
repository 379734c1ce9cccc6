"""Exception types shared across the package."""


class SartmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SartmError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(SartmError, ValueError):
    """Spatial extents do not divide evenly for a stride, window or patch size."""


class DomainError(SartmError, ValueError):
    """Argument outside the domain of an operation."""


class ContractError(SartmError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(SartmError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class FusionError(SartmError, ValueError):
    """Feature maps that must be fused have mismatched geometry."""


class NumericalError(SartmError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class RasterFormatError(SartmError, ValueError):
    """Malformed PPM/PGM file."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LossWarning(UserWarning):
    """A loss term was degenerate (e.g. every pixel ignored) and returned zero."""
