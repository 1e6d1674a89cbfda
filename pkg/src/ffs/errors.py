"""Exception hierarchy shared by every module."""


class FFSError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FFSError, ValueError):
    pass


class NumericOverflow(FFSError, ArithmeticError):
    """A non-finite value appeared inside a computation.

    ``where`` names the offending stage (layer index, draw index, loss term).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(FFSError):
    """Binary file could not be decoded; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(FFSError, ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(FFSError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
