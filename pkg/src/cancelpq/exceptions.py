"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CancelPQError(Exception):
    exit_code = 1


class ParameterError(CancelPQError, ValueError):
    exit_code = 2


class CapacityError(ParameterError):
    """Vector dimension exceeds what a homomorphic backend can hold."""


class StateError(CancelPQError, RuntimeError):
    exit_code = 2


class DataError(CancelPQError, ValueError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AuthorizationError(CancelPQError, PermissionError):
    exit_code = 4


class KeyMismatchError(AuthorizationError):
    """Ciphertexts or keys from different key sets were combined."""
