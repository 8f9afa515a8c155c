"""Exception types shared across the toolchain."""

from __future__ import annotations


class RailsynthError(Exception):
    """Base class for all railsynth errors."""


class ValidationError(RailsynthError):
    """Input data violates a documented invariant."""


class ManifestError(RailsynthError):
    """Manifest file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestVersionError(ManifestError):
    """Manifest schema_version is not one this build understands."""


class ExtractionEmpty(RailsynthError):
    """Segmentation produced no object pixels."""


class ObjectTooSmall(RailsynthError):
    """Rescaled cutout would be below the minimum visible size."""


class PlacementOutOfFrame(RailsynthError):
    """Requested paste footprint lies entirely outside the frame."""


class BackendError(RailsynthError):
    """An extraction or flow backend failed; names the backend."""


class PluginError(BackendError):
    """Subprocess plugin violated the line protocol or timed out."""


class ConfigError(RailsynthError):
    """Configuration file is invalid; names the offending key path."""
