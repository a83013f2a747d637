"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation problems exit 1, numeric or
runtime failures exit 2, external-service failures exit 3.
"""


class VapError(Exception):
    exit_code = 2


class ValidationError(VapError, ValueError):
    exit_code = 1

    def __init__(self, message: str, field: str | None = None):
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ConfigError(ValidationError):
    pass


class ConflictError(ValidationError):
    pass


class EmptyClassError(VapError, LookupError):
    exit_code = 1

    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} has no descriptions in the bank")
        self.class_id = class_id


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(VapError, ArithmeticError):
    exit_code = 2


class TransportError(VapError):
    exit_code = 3


class ProtocolError(VapError):
    exit_code = 3


class BatchAbortError(VapError):
    exit_code = 3
