"""Exception hierarchy shared by every deepf0 module.

Each class maps onto one CLI exit code (see :mod:`deepf0.cli`).
"""


class DeepF0Error(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DeepF0Error, ValueError):
    exit_code = 2


class ShapeError(DeepF0Error, ValueError):
    exit_code = 2


class DomainError(DeepF0Error, ValueError):
    """An argument lies outside the domain of the operation."""

    exit_code = 3


class FormatError(DeepF0Error, ValueError):
    """Malformed or unsupported file content."""

    exit_code = 3


class ParseError(FormatError):
    pass


class OrderError(FormatError):
    pass


class UndefinedMetricError(DeepF0Error, ValueError):
    exit_code = 3


class NumericError(DeepF0Error, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
