"""Exception hierarchy.

Every error carries a short machine-readable ``category`` used by the CLI
when reporting failures as ``error: <category>: <message>``.
"""


class MTSEError(Exception):
    category = "error"


class DimensionError(MTSEError, ValueError):
    category = "dimension"


class InputError(MTSEError, ValueError):
    category = "input"


class ConfigError(MTSEError, ValueError):
    category = "config"


class FormatError(MTSEError, ValueError):
    category = "format"


class NumericError(MTSEError, ArithmeticError):
    category = "numeric"

    def __init__(self, message, op=None):
        super().__init__(message if op is None else f"{op}: {message}")
        self.op = op


class DegenerateError(MTSEError, ValueError):
    category = "degenerate"


class IOFailure(MTSEError, OSError):
    category = "io"
