"""Exception types shared across the package."""


class SgenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SgenError):
    """Invalid configuration: bad shapes, bad hyperparameters, bad option values."""


class UsageError(SgenError):
    """API misuse, e.g. calling backward on a tensor that was never recorded."""


class NumericsError(SgenError):
    """Non-finite values where finite ones are required (NaN activation, NaN gradient)."""


class ImageFormatError(SgenError):
    """Malformed PGM/PPM file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(SgenError):
    """Unreadable or inconsistent checkpoint file."""


class DivergenceError(SgenError):
    """Training produced a non-finite or runaway loss."""
