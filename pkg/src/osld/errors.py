"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/validation problems exit with 2,
numerical failures with 3.
"""


class OSLDError(Exception):
    """Base class for every error raised by this package."""


class DataError(OSLDError, ValueError):
    """Bad or inconsistent input data."""


class NumericalError(OSLDError, ArithmeticError):
    """A computation produced or received a non-finite / degenerate value."""


class DegenerateInputError(NumericalError):
    """Zero-norm vector passed where a direction is required."""


class NonFiniteError(NumericalError):
    """NaN or infinity in gradients or losses."""


class EmptyBatchError(DataError):
    pass


class UnsatisfiableBatchError(DataError):
    """The class->items index cannot produce a valid triplet."""


class UndefinedRecallError(DataError):
    """No query has a relevant item, so Recall@K is undefined."""


class EmptyCropError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class ManifestError(DataError):
    pass


class ManifestParseError(ManifestError):
    pass


class DanglingClassError(ManifestError):
    """A box references a class id with no canonical record."""


class OpenSetViolationError(ManifestError):
    """A class appears in more than one split."""


class BoxOutOfBoundsError(ManifestError):
    pass


class FileFormatError(DataError):
    """Checkpoint or index file is malformed."""


class ConfigError(DataError):
    pass
