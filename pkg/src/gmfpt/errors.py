"""Exception hierarchy shared by the library and the CLI.

Each family carries the process exit code the CLI maps it to.
"""


class FingerprintError(Exception):
    exit_code = 1


class ValidationError(FingerprintError, ValueError):
    exit_code = 4


class DimensionError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid scenario / training configuration; message names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(ValidationError):
    """Malformed FPTE file or sidecar manifest."""


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NumericalError(FingerprintError, ArithmeticError):
    exit_code = 5
