"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class DfdError(Exception):
    exit_code = 1


class ParameterError(DfdError, ValueError):
    """Invalid argument values or shapes."""

    exit_code = 2


class CapabilityError(DfdError):
    """A model or operator lacks an operation the caller needs."""

    exit_code = 3


class NumericalError(DfdError, ArithmeticError):
    """Singular systems, non-finite intermediates, divergence."""

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularityError(NumericalError):
    pass


class DegeneratePsfError(ParameterError):
    pass


class CalibrationError(NumericalError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(DfdError):
    """Malformed or truncated file contents."""

    exit_code = 5

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
