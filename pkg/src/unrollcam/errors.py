"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class TapeStateError(RuntimeError):
    """A gradient tape was used out of order (e.g. backward twice)."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared where finite values are required.

    ``node`` names the producing operation when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
