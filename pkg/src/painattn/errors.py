"""Exception hierarchy shared by every module."""


class PainAttnError(Exception):
    pass


class DimensionError(PainAttnError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(PainAttnError, ValueError):
    """An argument lies outside the operation's domain."""


class StateError(PainAttnError, RuntimeError):
    """A stateful object was used out of order (e.g. backward before forward)."""


class ConfigError(PainAttnError, ValueError):
    """A configuration is internally inconsistent."""


class NumericError(PainAttnError, ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(PainAttnError, ValueError):
    """A binary or text file does not match its declared format."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
