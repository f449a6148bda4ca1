"""Face-driven, description-controllable text to speech at desk scale."""

from .errors import (
    ConfigError,
    DataError,
    FacespeakError,
    GenerationError,
    InputError,
    MetricUndefinedError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FacespeakError",
    "GenerationError",
    "InputError",
    "MetricUndefinedError",
    "StateError",
    "__version__",
]
