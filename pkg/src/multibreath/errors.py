"""Exception hierarchy shared across the package.

The command-line layer maps these families onto exit codes, so every
failure raised by library code derives from one of the three roots below.
"""


class MultibreathError(Exception):
    """Base class for all package errors."""


class DataError(MultibreathError):
    """Bad or inconsistent input data (files, annotations, splits)."""


class ParseError(DataError):
    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if lineno is not None:
            where.append(f"line {lineno}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ValidationError(DataError):
    pass


class RangeError(DataError):
    pass


class SplitIntegrityError(DataError):
    pass


class NumericalError(MultibreathError):
    """Non-finite values or failed numerical verification."""


class NonFiniteError(NumericalError):
    pass


class ShapeError(MultibreathError, ValueError):
    pass


class CheckpointError(MultibreathError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ConfigError(MultibreathError):
    """Unknown or malformed configuration keys."""
