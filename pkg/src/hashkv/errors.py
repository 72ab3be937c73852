"""Exception types shared across the package."""


class HashKVError(Exception):
    """Base class for all errors raised by hashkv."""


class ShapeError(HashKVError, ValueError):
    """Array shapes or dimensions do not agree."""


class FormatError(HashKVError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFileError(FormatError):
    """A binary file ends before the payload its header advertises."""


class NumericError(HashKVError, ArithmeticError):
    """A computation produced or received non-finite values."""


class EmptyPairsError(HashKVError, ValueError):
    """A loss was requested over an empty set of valid entries."""
