"""Exception types shared across the package."""


class RehearseError(Exception):
    pass


class InvalidArgument(RehearseError, ValueError):
    pass


class InvalidState(RehearseError, RuntimeError):
    pass


class CapacityError(RehearseError, RuntimeError):
    """Buffer is over budget and nothing can be evicted."""


class NumericError(RehearseError, ArithmeticError):
    """Non-finite gradient or loss encountered during training."""

    def __init__(self, message, session=None):
        if session is not None:
            message = f"session {session}: {message}"
        super().__init__(message)
        self.session = session


# Loader errors for the binary containers.
class FormatError(RehearseError, ValueError):
    pass


class MalformedHeader(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class LabelOutOfRange(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass
