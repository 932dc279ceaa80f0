"""Exception hierarchy shared by every siamcaps module."""


class SiamcapsError(Exception):
    """Base class; the CLI maps any subclass to exit code 2."""


class DimensionError(SiamcapsError, ValueError):
    pass


class UsageError(SiamcapsError, RuntimeError):
    pass


class NumericalError(SiamcapsError, ArithmeticError):
    pass


class FormatError(SiamcapsError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(SiamcapsError, ValueError):
    pass


class DomainError(SiamcapsError, ValueError):
    pass
