"""
This module defines the error hierarchy raised by the surfel depth modules.
"""
from pathlib import Path


class SurfelDepthError(Exception):
    """Base class for all surfel depth errors."""


class BehindCameraError(SurfelDepthError):
    """A point has non-positive depth in the camera it is projected into."""


class OutOfBoundsError(SurfelDepthError):
    """A sub-pixel coordinate lies outside the sampling margin of an image."""


class DegeneratePlaneError(SurfelDepthError):
    """A surfel plane is (nearly) parallel to the ray through its center."""


class InsufficientObservationsError(SurfelDepthError):
    """Too few valid (frame, pixel) pairs constrain a surfel."""

    def __init__(self, valid: int, required: int) -> None:
        super().__init__(f"{valid} valid observations, {required} required")
        self.valid = valid
        self.required = required


class EmptyOverlapError(SurfelDepthError):
    """An estimate and its reference share no valid pixel."""


class ConfigurationError(SurfelDepthError):
    """A configuration value violates its invariant."""


class DatasetParseError(SurfelDepthError):
    """A dataset file could not be parsed."""

    def __init__(
        self,
        path: str | Path,
        line_number: int,
        message: str,
        field: str | None = None,
    ) -> None:
        location = f"{path}:{line_number}"
        if field is not None:
            location += f" ({field})"
        super().__init__(f"{location}: {message}")
        self.path = str(path)
        self.line_number = line_number
        self.field = field
