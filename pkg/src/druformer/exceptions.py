"""Exceptions for the druformer library."""

from typing import Optional


class DruformerError(Exception):
    """Base exception for all druformer errors."""

    pass


class ShapeError(DruformerError):
    """Raised when tensor shapes or dimensions are incompatible."""

    pass


class NonFiniteError(DruformerError):
    """Raised when a forward operation produces NaN or Inf."""

    def __init__(self, message: str, op_name: Optional[str] = None) -> None:
        """Initialize the non-finite error.

        Args:
            message: Error message describing the failure
            op_name: Name of the operation that produced the non-finite value
        """
        super().__init__(message)
        self.op_name = op_name


class TapeError(DruformerError):
    """Raised when backward is requested for a tensor the tape never recorded."""

    pass


class MatchingError(DruformerError):
    """Raised for invalid cost matrices or assignments."""

    pass


class GeometryError(DruformerError):
    """Raised when a box conversion would produce a degenerate box."""

    pass


class UnknownIntentionError(DruformerError):
    """Raised when a driving-intention command is not in the vocabulary."""

    def __init__(self, text: str) -> None:
        """Initialize the unknown-intention error.

        Args:
            text: The command text that failed to parse
        """
        super().__init__(f"Unknown driving intention: {text!r}")
        self.text = text


class SceneSamplingError(DruformerError):
    """Raised when rejection sampling of scene geometry is exhausted."""

    pass


class DatasetError(DruformerError):
    """Raised for dataset IO and format problems."""

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        """Initialize the dataset error.

        Args:
            message: Error message describing the problem
            line_number: 1-based line of the annotation file, when applicable
        """
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(DruformerError):
    """Raised when a run configuration cannot be loaded or validated."""

    pass


class CheckpointError(DruformerError):
    """Raised for malformed or incompatible checkpoints."""

    pass


class DivergenceError(DruformerError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        """Initialize the divergence error.

        Args:
            message: Diagnostic message
            step: Optimizer step at which divergence was detected
        """
        super().__init__(message)
        self.step = step


class InvariantViolation(DruformerError):
    """Raised when a runtime invariant (e.g. row-stochastic attention) is broken."""

    pass
