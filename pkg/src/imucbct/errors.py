"""Exception types shared across the toolkit."""


class ImucbctError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(ImucbctError):
    """Invalid scan, experiment or filter configuration."""


class FormatError(ImucbctError):
    """Malformed input file. Carries the offending row when known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DegenerateProjectionError(ImucbctError):
    """Point lies in (or too close to) the camera's principal plane."""


class DegenerateKinematicsError(ImucbctError):
    """Segment geometry does not define a frame (zero length, axis parallel to reference)."""


class DegenerateControlPointsError(ImucbctError):
    """Control points do not determine a stable deformation (e.g. collinear in 3D)."""


class CoverageError(ImucbctError):
    """A sample series is too short for the requested mapping or scan."""


class IntegrationError(ImucbctError):
    """Non-finite sample encountered during strapdown integration."""

    def __init__(self, message, sample=None):
        if sample is not None:
            message = f"sample {sample}: {message}"
        super().__init__(message)
        self.sample = sample


class InitializationError(ImucbctError):
    """Pose initialization solver failed to converge."""


class ConditioningError(ImucbctError):
    """Initialization geometry is too ill-conditioned to solve."""


class ShortScanError(ImucbctError):
    """Scan arc is shorter than 180 degrees plus the fan angle."""


class ShapeError(ImucbctError):
    """Mismatched grid or series shapes."""


class PipelineStageError(ImucbctError):
    """A pipeline stage failed. Carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
