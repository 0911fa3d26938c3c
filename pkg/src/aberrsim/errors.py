"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
failures onto its 2/3/4 contract without inspecting messages.
"""


class AberrSimError(Exception):
    exit_code = 1


class ConfigError(AberrSimError, ValueError):
    """Malformed or out-of-range configuration."""

    exit_code = 2


class ShapeError(ConfigError):
    """Array dimensions do not satisfy an operation's preconditions."""


class PerturbationError(ConfigError):
    pass


class GeometryError(AberrSimError, ArithmeticError):
    """A ray or prescription that cannot be traced."""

    exit_code = 3


class TotalInternalReflection(GeometryError):
    pass


class DegenerateFieldError(GeometryError):
    """No live rays (or too few hits) to form a PSF statistic."""


class DataIOError(AberrSimError, OSError):
    exit_code = 4
