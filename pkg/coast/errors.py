"""
Error hierarchy shared by every module. The CLI maps these onto exit codes.
"""


class CoastError(Exception):
    pass


class DimensionError(CoastError, ValueError):
    pass


class ContractError(CoastError):
    pass


class ConfigError(CoastError, ValueError):
    pass


class OrthonormalizationError(CoastError, ValueError):
    pass


class FormatError(CoastError):
    """Malformed file. `offset` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericalError(CoastError, ArithmeticError):
    """Non-finite value. `parameter` names the offending parameter when known."""

    def __init__(self, message: str, parameter: str | None = None):
        self.parameter = parameter
        super().__init__(message)
