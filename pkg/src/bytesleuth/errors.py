"""Exception hierarchy shared by all modules."""


class BytesleuthError(Exception):
    """Base class for every error raised by this package."""


class LengthMismatch(BytesleuthError, ValueError):
    pass


class OutOfBounds(BytesleuthError, ValueError):
    pass


class EmptyInput(BytesleuthError, ValueError):
    pass
