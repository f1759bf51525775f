"""Exception hierarchy shared across the package."""


class SfsviError(Exception):
    """Base class for all library errors."""


class ShapeError(SfsviError, ValueError):
    pass


class UnsupportedOpError(SfsviError, TypeError):
    pass


class DomainError(SfsviError, ValueError):
    pass


class CapacityError(SfsviError, ValueError):
    pass


class NumericalError(SfsviError, ArithmeticError):
    pass


class FormatError(SfsviError, ValueError):
    """Malformed on-disk data (IDX files, snapshots, coreset exports)."""


class DataError(SfsviError, ValueError):
    """Invalid data values, e.g. labels outside a head's range."""


class ConfigError(SfsviError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(SfsviError, RuntimeError):
    pass
