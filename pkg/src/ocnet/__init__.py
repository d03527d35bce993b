"""Occlusion-correcting person re-identification at desk scale."""
from .config import RunConfig
from .errors import ConfigError, NumericError, ValidationError

__version__ = "0.1.0"
__all__ = ["RunConfig", "ConfigError", "NumericError", "ValidationError"]
