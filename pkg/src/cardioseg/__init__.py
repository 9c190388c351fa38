"""Self-contained cardiac MR segmentation: a fully convolutional
encoder-decoder trained with a logarithmic dice loss, on top of a small
tape-based autodiff core. numpy is the only runtime dependency.

The subpackages split along the pipeline: `ndtensor` (tensors and the
tape), `layers`, `models`, `losses`, `data` (volumes, preprocessing,
augmentation, phantom), `metrics`, `engine` (training and inference),
`gradcheck`, and the `cli` front end.
"""

from . import cli, data, engine, gradcheck, layers, losses, metrics, models, ndtensor
from .errors import (AxisError, CardiosegError, CompatibilityError, DataError,
                     DegenerateStudyError, DomainError, FormatError, LabelError,
                     NumericalError, PairingError, ParameterError, ShapeError,
                     StatisticsError, TapeError, UnsupportedError)

__version__ = "1.0.0"

__all__ = [
    "AxisError", "CardiosegError", "CompatibilityError", "DataError",
    "DegenerateStudyError", "DomainError", "FormatError", "LabelError",
    "NumericalError", "PairingError", "ParameterError", "ShapeError",
    "StatisticsError", "TapeError", "UnsupportedError",
    "cli", "data", "engine", "gradcheck", "layers", "losses", "metrics",
    "models", "ndtensor", "__version__",
]
