"""Exception types shared across the package."""


class RadioSlamError(Exception):
    """Base class for all package errors."""


class DegenerateInput(RadioSlamError):
    """An input is geometrically or numerically unusable (zero vector,
    non-unit axis, point off the polygon plane, negative path length...)."""


class ConfigError(RadioSlamError):
    """A scenario configuration value or file is invalid."""


class ConvergenceError(RadioSlamError):
    """An iterative routine produced non-finite values or failed to settle."""


class EdgeUnavailable(RadioSlamError):
    """Too few reflecting elements to estimate a facade boundary."""


class InsufficientPaths(RadioSlamError):
    """Fewer propagation paths than the operation needs."""


class DecodeFailure(RadioSlamError):
    """The trellis decoder found no admissible state sequence."""


class SolveFailure(RadioSlamError):
    """The constrained least-squares stage found no usable root."""


class DegenerateGeometry(RadioSlamError):
    """Anchor geometry is rank deficient; the solve would be meaningless."""
