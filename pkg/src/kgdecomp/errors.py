"""Exception hierarchy.

Each family maps to a distinct CLI exit code (see ``kgdecomp.cli``).
"""


class KGDecompError(Exception):
    exit_code = 1


class ConfigError(KGDecompError, ValueError):
    exit_code = 3


class DataError(KGDecompError, ValueError):
    exit_code = 4


class CheckpointError(KGDecompError):
    exit_code = 5


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was read."""


class CheckpointMismatchError(CheckpointError):
    """Registry names/shapes in the file disagree with the stored config."""


class NumericalError(KGDecompError, ArithmeticError):
    exit_code = 6


class ShapeError(KGDecompError, ValueError):
    """Operand shapes do not agree."""
