"""
Error hierarchy for the denoising engine.

Library code raises these; management commands turn them into CommandError.
"""

from typing import Any, Optional, Sequence


class DenoisingError(Exception):
    """Base class for every error raised by the engine."""


class InvalidArgumentError(DenoisingError, ValueError):
    """An argument is outside its documented domain (e.g. dilation < 1)."""


class ShapeMismatchError(DenoisingError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, expected: Any, got: Any, detail: str = ""):
        self.op = op
        self.expected = expected
        self.got = got
        message = f"{op}: expected {expected}, got {got}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GradientError(DenoisingError):
    """Backward pass cannot be run (non-scalar loss, missing gradient)."""


class TensorFormatError(DenoisingError):
    """An ASLT tensor blob is corrupt, truncated or of an unknown version."""


class WeightFileError(DenoisingError):
    """An ASLW weight file is corrupt, truncated or has duplicate names."""


class ConfigError(DenoisingError):
    """Run configuration is invalid (unknown key, bad value)."""


class DatasetError(DenoisingError):
    """Dataset directory or subject files are missing or inconsistent."""


class MetricsError(DenoisingError, ValueError):
    """A metric is undefined for its inputs (empty mask, zero WM mean)."""


class TrainingDivergedError(DenoisingError):
    """Loss became NaN/Inf; carries the last parameters with a finite loss."""

    def __init__(self, epoch: int, step: int, loss: float,
                 last_good_params: Optional[Any] = None,
                 bad_parameters: Sequence[str] = ()):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.last_good_params = last_good_params
        self.bad_parameters = list(bad_parameters)
        message = f"training diverged at epoch {epoch}, step {step}: loss={loss}"
        if self.bad_parameters:
            message += f"; non-finite gradients in {', '.join(self.bad_parameters[:5])}"
        super().__init__(message)
