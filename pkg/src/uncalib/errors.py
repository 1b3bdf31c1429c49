"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can print a
single ``error: <code>: <message>`` line.
"""


class UncalibError(Exception):
    code = "error"


class ConfigurationError(UncalibError, ValueError):
    code = "config"


class UsageError(ConfigurationError):
    """Bad command-line arguments."""

    code = "usage"


class SchemaError(UncalibError, ValueError):
    """CSV header does not match the grid."""

    code = "schema"

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class OrderingError(UncalibError, ValueError):
    """Timestamps are not strictly increasing."""

    code = "ordering"

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class FormatError(UncalibError, ValueError):
    code = "format"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class FitError(UncalibError, ValueError):
    code = "fit"


class NumericError(UncalibError, ArithmeticError):
    code = "numeric"


class InputError(UncalibError, ValueError):
    code = "input"


class DivergenceError(UncalibError, ArithmeticError):
    code = "divergence"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ModelFormatError(UncalibError, ValueError):
    """Model, residual or state file cannot be loaded."""

    code = "load"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
