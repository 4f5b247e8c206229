"""Exception types shared across the package."""


class HeaddError(Exception):
    """Base class for all package errors."""


class DimensionError(HeaddError):
    """An array or code has the wrong shape, rank, or range."""


class GeometryError(HeaddError):
    """Invalid camera, ray, or mesh geometry (e.g. projecting a point behind the camera)."""


class ParseError(HeaddError):
    """A file could not be parsed; message includes file and line where possible."""


class FittingError(HeaddError):
    """A fitting stage received unusable inputs or failed to make progress."""


class TrainingDiverged(HeaddError):
    """Training hit non-finite values; carries the last good checkpoint directory."""

    def __init__(self, message, checkpoint_dir=None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir


class GradientError(HeaddError):
    """A backward pass produced non-finite gradients; message names the parameter block."""
