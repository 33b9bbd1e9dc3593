"""
Error types raised across the pipeline.

Every error carries an optional ``path`` so the CLI can report where an
artifact problem happened.
"""
from typing import Optional


class LatentLensError(Exception):
    """Base class for all pipeline errors"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.path = path

    def to_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "path": self.path,
        }


class FormatError(LatentLensError):
    """Binary or text artifact does not follow its declared format"""


class ValidationError(LatentLensError):
    """Well-formed input whose content breaks a data invariant"""


class SpecError(LatentLensError):
    """Synthetic corpus specification cannot be realized"""


class ShapeError(LatentLensError):
    """Vector or matrix dimensions disagree"""


class UsageError(LatentLensError):
    """Operation called outside its preconditions"""


class TrainingError(LatentLensError):
    """Autoencoder training diverged"""

    def __init__(self, message: str, epoch: int, path: Optional[str] = None):
        super().__init__(message, path)
        self.epoch = epoch


class ConvergenceError(LatentLensError):
    """Probe optimizer ran out of iterations"""

    def __init__(self, message: str, grad_norm: float, path: Optional[str] = None):
        super().__init__(message, path)
        self.grad_norm = grad_norm


class NumericalError(LatentLensError):
    """Quantity undefined for the given input (e.g. cosine of a zero vector)"""


class ConfigError(LatentLensError):
    """Run configuration is malformed or inconsistent"""


class MissingArtifactError(LatentLensError):
    """An upstream pipeline artifact is not on disk"""
