"""Exception types raised across the package."""


class LsirtError(Exception):
    """Base class for all errors raised by learned_sirt."""


class GeometryError(LsirtError, ValueError):
    """Invalid grid or acquisition geometry."""


class ShapeError(LsirtError, ValueError):
    """Array shape does not match the grid, geometry or model."""


class NumericError(LsirtError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class DivergenceError(NumericError):
    """An iterative method's residual blew up."""


class TapeError(LsirtError, RuntimeError):
    """A forward tape was reused or does not match the backward call."""


class FitError(LsirtError, RuntimeError):
    """Least-squares fit did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3g})")
        self.residual = residual


class ConfigError(LsirtError, ValueError):
    """Invalid or unknown configuration."""
