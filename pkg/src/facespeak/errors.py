"""Exception hierarchy shared across the package."""


class FacespeakError(Exception):
    """Base class for all package errors."""


class InputError(FacespeakError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class ConfigError(FacespeakError, ValueError):
    """A configuration value is inconsistent or missing."""


class DataError(FacespeakError, ValueError):
    """A corpus record or manifest is malformed."""


class StateError(FacespeakError, RuntimeError):
    """An operation was invoked before its required state was loaded."""


class GenerationError(FacespeakError, RuntimeError):
    """Decoding produced no usable output."""


class MetricUndefinedError(FacespeakError, RuntimeError):
    """A metric has no defined value for the given input (e.g. fully unvoiced audio)."""
