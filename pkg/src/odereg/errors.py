"""Exceptions raised by the binary readers."""


class FormatError(ValueError):
    """File does not follow the expected binary layout (bad magic, bad header)."""


class TruncatedFileError(FormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: truncated payload, expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class ShapeMismatchError(FormatError):
    """Header shapes disagree with the architecture or with each other."""


class UnsupportedDtypeError(FormatError):
    """Unknown dtype code in a grid header."""


class DimensionOverflowError(FormatError):
    """Header dims whose product does not fit the addressable payload."""
