"""Exception hierarchy shared by every stage of the pipeline."""


class MovqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MovqError, ValueError):
    """Inconsistent shapes, sizes or hyperparameters."""


class NumericError(MovqError, ValueError):
    """Non-finite values or mismatched tensor shapes at run time."""


class FormatError(MovqError, ValueError):
    """A serialized artifact is corrupt or has an unknown layout."""


class ValidationError(MovqError, ValueError):
    """Well-formed data whose contents violate an invariant (e.g. index >= K)."""


class ModeError(MovqError, RuntimeError):
    """An operation was invoked on a model trained for a different mode."""


class DatasetError(MovqError, RuntimeError):
    """No usable images could be loaded."""
