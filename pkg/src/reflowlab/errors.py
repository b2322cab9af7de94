"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shape does not fit the network or operation."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a gradient, loss or trajectory."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DegenerateInputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SchemaError(ConfigError):
    """A persisted document carries an unsupported format or schema version."""
