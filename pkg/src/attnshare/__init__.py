"""Attention sharing with shifted rotary positions on a toy multi-modal DiT."""

from attnshare.errors import ConfigurationError, ShapeError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ShapeError", "ValidationError", "__version__"]
