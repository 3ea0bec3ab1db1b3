"""Typed errors raised across the toolkit.

All failures surface as one of these classes; numerical problems (NaN/Inf)
are never silently propagated.
"""


class SlowVaeError(Exception):
    """Base class for all toolkit errors."""


class InputError(SlowVaeError, ValueError):
    """An operation received arguments that violate its preconditions."""


class ConfigError(SlowVaeError, ValueError):
    """A configuration value is out of range or internally inconsistent."""


class ProtocolError(SlowVaeError, RuntimeError):
    """An API was used out of order, e.g. backward without a forward trace."""


class DivergenceError(SlowVaeError, ArithmeticError):
    """Training produced a non-finite loss or gradient.

    Carries enough context (layer index, epoch/batch coordinates) to locate
    the offending update.
    """

    def __init__(self, message, *, layer_index=None, epoch=None, batch=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.epoch = epoch
        self.batch = batch


class FormatError(SlowVaeError, ValueError):
    """A file does not match the expected binary format or version."""
