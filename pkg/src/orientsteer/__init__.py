"""End-to-end steering-angle prediction from monocular image sequences.

The package bundles the pieces needed to run desk-scale steering
experiments: pixel-wise orientation maps computed from camera intrinsics,
a PilotNet+LSTM sequence model, cost-sensitive regression losses for
long-tail steering distributions, a synthetic road generator, and a
training/evaluation harness with a reproducible CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigMismatchError,
    FormatError,
    OrientSteerError,
    ResourceLimitError,
    TrainingDivergedError,
    ValidationError,
)

__all__ = [
    "__version__",
    "OrientSteerError",
    "FormatError",
    "ValidationError",
    "ConfigMismatchError",
    "ResourceLimitError",
    "TrainingDivergedError",
]
