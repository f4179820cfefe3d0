"""Exception types shared by the library and mapped to CLI exit codes."""


class RetrievalKitError(Exception):
    exit_code = 1


class ValidationError(RetrievalKitError, ValueError):
    """Bad input data or parameters."""

    exit_code = 2


class StorageError(RetrievalKitError, OSError):
    """File could not be read or written."""

    exit_code = 3


class DivergenceError(RetrievalKitError, ArithmeticError):
    """A loss or parameter became non-finite."""

    exit_code = 4

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
