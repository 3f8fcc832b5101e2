"""
Exception hierarchy for the heat-operator pipeline.

The command-line entry point maps each family to its own exit code.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_STORAGE = 4


class HeatOpError(Exception):
    """Base class for all pipeline failures"""
    exit_code = EXIT_UNEXPECTED


class ConfigError(HeatOpError, ValueError):
    """Invalid configuration or invalid input parameters"""
    exit_code = EXIT_CONFIG


class NumericError(HeatOpError):
    """A numerical step could not produce a valid result"""
    exit_code = EXIT_NUMERIC


class StorageError(HeatOpError):
    """Reading or writing an artifact failed"""
    exit_code = EXIT_STORAGE


class GridError(ConfigError):
    pass


class ShapeError(ConfigError):
    """Array shapes or index sets do not agree"""
    pass


class BoundaryError(NumericError):
    pass


class FactorizationError(NumericError):
    pass


class SourceError(NumericError):
    pass


class OracleError(NumericError):
    pass


class MetricsError(NumericError, ValueError):
    pass


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss; `report` holds what was recorded so far"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class DatasetFormatError(StorageError):
    pass


class ModelFormatError(StorageError):
    pass
