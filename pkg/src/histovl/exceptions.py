"""Exception hierarchy. Each leaf maps to a distinct CLI exit code."""


class HistoVLError(Exception):
    exit_code = 10


class InvalidArgumentError(HistoVLError, ValueError):
    exit_code = 11


class ShapeError(HistoVLError, ValueError):
    exit_code = 12


class NumericalError(HistoVLError, ArithmeticError):
    exit_code = 13


class FormatError(HistoVLError, ValueError):
    """Bad magic, version, dtype or header in a file."""

    exit_code = 14


class CorruptionError(HistoVLError, ValueError):
    """Payload disagrees with its header (truncation, trailing garbage)."""

    exit_code = 15


class ConfigError(HistoVLError, ValueError):
    exit_code = 16


class LookupFailure(HistoVLError, KeyError):
    exit_code = 17


class EmptySlideError(HistoVLError, ValueError):
    exit_code = 18


class UndefinedMetricError(HistoVLError, ValueError):
    exit_code = 19


class TrainingError(HistoVLError, RuntimeError):
    """Non-finite loss during optimisation; carries the epoch index."""

    exit_code = 20

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConsistencyError(HistoVLError, RuntimeError):
    exit_code = 21
