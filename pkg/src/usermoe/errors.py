"""Exception hierarchy shared by every module."""


class UserMoeError(Exception):
    """Base class for all package errors."""


class DimensionError(UserMoeError, ValueError):
    pass


class NumericError(UserMoeError, ArithmeticError):
    pass


class ContractError(UserMoeError, ValueError):
    """A caller violated a documented precondition."""


class VocabularyError(UserMoeError, IndexError):
    def __init__(self, channel, token, vocab_size):
        self.channel = channel
        self.token = token
        self.vocab_size = vocab_size
        super().__init__(
            f"channel {channel!r}: token id {token} outside vocabulary [0, {vocab_size})"
        )


class SchemaError(UserMoeError, ValueError):
    pass


class ParseError(UserMoeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(UserMoeError, ValueError):
    pass


class CheckpointError(UserMoeError):
    pass


class LengthMismatchError(SchemaError):
    pass
