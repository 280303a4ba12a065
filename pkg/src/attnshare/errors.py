class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ValidationError(ValueError):
    """An input violates a precondition (non-finite data, bad scalar, empty operand)."""


class ConfigurationError(ValueError):
    """A run or model configuration is inconsistent."""
