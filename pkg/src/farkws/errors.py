"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status (2 config, 3 data, 4 numeric divergence).
"""


class KWSError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(KWSError):
    exit_code = 2
    kind = "config"


class UsageError(ConfigError):
    kind = "usage"


class DataError(KWSError):
    exit_code = 3
    kind = "data"


class FormatError(DataError):
    kind = "format"


class UnsupportedFormatError(FormatError):
    kind = "unsupported-format"


class ParseError(DataError):
    kind = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DataError):
    kind = "validation"


class TooShortError(DataError):
    kind = "too-short"


class ShapeError(KWSError, ValueError):
    exit_code = 3
    kind = "shape"


class DegenerateBatchError(KWSError, ValueError):
    exit_code = 2
    kind = "degenerate-batch"


class WindowTooShortError(KWSError, ValueError):
    exit_code = 3
    kind = "window-too-short"


class OracleRangeError(KWSError, ValueError):
    kind = "oracle-range"


class DivergenceError(KWSError, FloatingPointError):
    exit_code = 4
    kind = "divergence"
