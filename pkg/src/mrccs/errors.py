class ConfigError(ValueError):
    """Shapes, plans or config values that cannot work together."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class DataError(ValueError):
    """Dataset directory or image content failed validation."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
