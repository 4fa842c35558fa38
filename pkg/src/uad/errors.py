"""Exception types raised across the package."""


class UADError(Exception):
    """Base class for all package errors."""


class InvalidInput(UADError, ValueError):
    pass


class InvalidTemperature(UADError, ValueError):
    pass


class InvalidConfig(UADError, ValueError):
    pass


class DivergenceError(UADError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class UADIOError(UADError, OSError):
    pass
