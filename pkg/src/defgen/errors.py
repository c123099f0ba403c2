"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class DimensionError(ValueError):
    """Shapes of two arrays are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class DataError(Exception):
    """A dataset or file on disk is missing, empty, or malformed."""


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointChecksumError(CheckpointError):
    """Payload checksum does not match; file is corrupt or truncated."""


class ResolutionError(DataError):
    """An image's resolution does not match the model and implicit resampling
    is not allowed; resize explicitly first."""
