# app/core/errors.py
from typing import Any, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class DenseFitError(Exception):
    """Base for every error raised by the fitting pipeline"""
    exit_code: int = EXIT_USAGE

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigurationError(DenseFitError):
    """Invalid model, fit or dataset configuration"""
    exit_code = EXIT_USAGE


class DimensionError(DenseFitError, ValueError):
    """Array shapes or lengths that do not agree"""
    exit_code = EXIT_USAGE


class ParameterError(DenseFitError, ValueError):
    """A parameter outside its valid domain (f <= 0, sigma <= 0, ...)"""
    exit_code = EXIT_USAGE


class InputError(DenseFitError):
    """Bad user input that is not a configuration value"""
    exit_code = EXIT_USAGE


class FormatError(DenseFitError):
    """Binary file with a bad magic, version or broken invariants"""
    exit_code = EXIT_IO


class DatasetIOError(DenseFitError):
    """Unreadable or unwritable dataset paths"""
    exit_code = EXIT_IO


class NumericError(DenseFitError):
    """NaN or infinite values reached the optimizer"""
    exit_code = EXIT_NUMERIC


class EmptyTargetError(DenseFitError):
    """Target IUV image carries nothing to fit against"""
    exit_code = EXIT_NUMERIC


class AlignmentError(DenseFitError):
    """Degenerate point sets for Procrustes alignment"""
    exit_code = EXIT_NUMERIC


class DivergenceError(NumericError):
    """Fit loss stayed far above its starting value"""

    def __init__(self, message: str, partial_result: Optional[Any] = None):
        super().__init__(message)
        self.partial_result = partial_result


def exit_code_for(error: BaseException) -> int:
    """Map any exception to the command line exit code convention"""
    if isinstance(error, DenseFitError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return EXIT_IO
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_NUMERIC
