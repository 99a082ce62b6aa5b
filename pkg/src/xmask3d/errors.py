"""Exception types shared across the package."""


class XMaskError(Exception):
    """Base class for all package errors."""


class ConfigError(XMaskError):
    """Invalid run configuration or generator parameters."""


class DimMismatch(XMaskError):
    """Operands have incompatible shapes."""


class ZeroNormRow(XMaskError):
    """A row that must be normalized has (near-)zero L2 norm."""

    def __init__(self, row: int, message: str | None = None):
        self.row = row
        super().__init__(message or f"row {row} has zero norm")


class ModeError(XMaskError):
    """Unknown condition mode."""


class StepOutOfRange(XMaskError):
    """Diffusion timestep outside [1, T]."""


class EmptySupervision(XMaskError):
    """No supervised points available for a loss."""


class NoValidMasks(XMaskError):
    """Mask-level loss invoked with zero valid masks."""


class EmptyInput(XMaskError):
    """An operation that pools over rows received no rows."""


class NonFiniteLoss(XMaskError):
    """Training loss became NaN/Inf; aborts with diagnostics."""
