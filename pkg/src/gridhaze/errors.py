"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so raising the
right class matters more than the message text.
"""


class GridhazeError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(GridhazeError, ValueError):
    """A scalar argument is outside its documented domain."""


class InputError(GridhazeError, ValueError):
    """An array/image/dataset argument has the wrong shape, range, or pairing."""


class ConfigError(GridhazeError, ValueError):
    """A configuration record is internally inconsistent or unknown."""


class CheckpointError(GridhazeError, RuntimeError):
    """A checkpoint cannot be loaded (corrupt archive or fingerprint mismatch)."""


class TrainingDiverged(GridhazeError, RuntimeError):
    """Training hit a non-finite loss. Carries the last good checkpoint bundle."""

    def __init__(self, message, last_bundle=None):
        super().__init__(message)
        self.last_bundle = last_bundle
