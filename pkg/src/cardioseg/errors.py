"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/parameter problems exit 2,
data and file-format problems exit 3, numerical failures exit 4.
"""


class CardiosegError(Exception):
    """Base class for all package errors."""


class ShapeError(CardiosegError, ValueError):
    """Tensor or volume extents do not match what an operation requires."""


class AxisError(CardiosegError, ValueError):
    """An axis index is invalid for the given shape."""


class DomainError(CardiosegError, ValueError):
    """An elementwise operation left its numeric domain (log <= 0, div by 0)."""


class TapeError(CardiosegError, RuntimeError):
    """backward() was asked to differentiate a tensor not on any tape."""


class ParameterError(CardiosegError, ValueError):
    """A configuration value or argument is out of its allowed range."""


class StatisticsError(CardiosegError, ValueError):
    """Batch statistics are undefined (single-element normalization batch)."""


class LabelError(CardiosegError, ValueError):
    """A label volume contains values outside the declared class range."""


class DataError(CardiosegError, ValueError):
    """A dataset is empty, inconsistent, or otherwise unusable."""


class FormatError(CardiosegError, ValueError):
    """A file does not conform to the expected binary layout."""


class UnsupportedError(CardiosegError, ValueError):
    """A file is valid but uses features outside the supported subset."""


class CompatibilityError(CardiosegError, ValueError):
    """A checkpoint does not match the model configuration it is loaded into."""


class PairingError(CardiosegError, ValueError):
    """Prediction and ground-truth study lists cannot be matched one-to-one."""


class DegenerateStudyError(CardiosegError, ValueError):
    """A study's measurements are degenerate (e.g. zero end-diastolic volume)."""


class NumericalError(CardiosegError, RuntimeError):
    """Training or checking produced non-finite or out-of-tolerance numbers."""
