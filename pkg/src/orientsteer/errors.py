"""Exception hierarchy shared across the package.

Plain ``ValueError`` is used for bad arguments to pure functions; the
classes below mark failures a caller may want to route differently
(corrupt files, violated data invariants, mismatched configs).
"""


class OrientSteerError(Exception):
    """Base class for all package-specific errors."""


class FormatError(OrientSteerError):
    """A file could not be parsed (bad syntax, bad magic, truncation)."""


class ValidationError(OrientSteerError):
    """Parsed data violates a documented invariant."""


class ConfigMismatchError(OrientSteerError):
    """Two components were combined with incompatible configurations."""


class ResourceLimitError(OrientSteerError):
    """A requested computation exceeds a configured resource budget."""


class TrainingDivergedError(OrientSteerError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, step: int, batch_indices, loss_value: float):
        self.step = step
        self.batch_indices = list(batch_indices)
        self.loss_value = loss_value
        super().__init__(
            f"non-finite loss {loss_value!r} at step {step} "
            f"(batch indices {self.batch_indices})"
        )
