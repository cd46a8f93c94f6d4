"""Exception hierarchy.

Input problems (bad files, bad labels, bad arguments) derive from
``InputError``; numerical failures derive from ``NumericError``. The CLI maps
the two families to exit codes 2 and 3.
"""


class CIFError(Exception):
    pass


class InputError(CIFError):
    pass


class UsageError(InputError):
    """An operation was called in a state where it cannot run."""


class DataError(InputError):
    pass


class LabelOverflowError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class MissingManifestError(DataError):
    pass


class ImageFormatError(DataError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class StructuralError(InputError):
    """Parameter vector does not match the expected layout."""


class CheckpointError(InputError):
    code = "checkpoint"


class NotACheckpointError(CheckpointError):
    code = "not-a-checkpoint"


class UnsupportedVersionError(CheckpointError):
    code = "unsupported-version"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class NumericError(CIFError):
    pass


class DegenerateDistributionError(NumericError):
    pass


class DegenerateRotationError(NumericError):
    pass
