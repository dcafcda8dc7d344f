"""Exception types shared across the package.

The CLI maps these onto process exit codes (see cli.py): configuration and
usage problems exit 2, data/IO problems exit 3, verification failures exit 4.
"""


class StattnError(Exception):
    """Base class for all package errors."""


class ShapeError(StattnError):
    """Operands have incompatible or unsupported shapes."""


class NonFiniteError(StattnError):
    """An operation produced NaN or Inf."""


class ConfigError(StattnError):
    """Invalid configuration value, key, or combination."""


class DataError(StattnError):
    """Malformed or unreadable data file.

    byte_offset, when known, is the position in the input stream at which
    parsing failed; it is embedded in the message for CLI users.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class VerificationError(StattnError):
    """A verification check failed."""
