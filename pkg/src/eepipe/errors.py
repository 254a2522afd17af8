"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (consumed twice, no active tape, ...)."""


class TokenError(ValueError):
    """A token id is outside the vocabulary or a sequence is overlong."""


class QueueProtocolError(RuntimeError):
    """A stage received a message that violates the schedule protocol."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""
