"""Exception hierarchy shared across the package."""


class SharpDROError(Exception):
    """Base class for all package errors."""


class DimensionError(SharpDROError, ValueError):
    pass


class NumericError(SharpDROError, FloatingPointError):
    pass


class PreconditionError(SharpDROError, ValueError):
    pass


class DomainError(SharpDROError, ValueError):
    pass


class IngestionError(SharpDROError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(SharpDROError, ValueError):
    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class DivergenceError(SharpDROError, RuntimeError):
    pass
