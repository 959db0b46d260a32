"""Exception types shared across the package."""


class EncRLError(Exception):
    """Base class for all package errors."""


class ConfigError(EncRLError, ValueError):
    """Invalid or unsupported configuration value."""


class UsageError(EncRLError, RuntimeError):
    """An operation was invoked in a state where it is not allowed."""


class ShapeError(EncRLError, ValueError):
    pass


class LengthError(EncRLError, ValueError):
    """Input length incompatible with a block cipher."""


class IntegrityError(EncRLError, ValueError):
    """Malformed padding or ciphertext."""


class DataError(EncRLError, ValueError):
    """Non-finite or otherwise unusable numeric input."""
