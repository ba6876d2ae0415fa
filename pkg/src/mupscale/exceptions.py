"""Exception types shared across the package."""


class MupscaleError(Exception):
    """Base class for all package errors."""


class InvalidMultiplierError(MupscaleError, ValueError):
    pass


class ShapeMismatchError(MupscaleError, ValueError):
    pass


class InvalidParameterError(MupscaleError, ValueError):
    pass


class VersionMismatchError(MupscaleError, ValueError):
    pass


class ConfigError(MupscaleError, ValueError):
    pass


class NumericalError(MupscaleError, FloatingPointError):
    """Raised when a NaN/inf shows up in gradients or weights."""


class CsvFormatError(MupscaleError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CsvValueError(CsvFormatError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message, line)
        self.column = column
