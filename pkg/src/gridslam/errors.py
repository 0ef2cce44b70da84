"""Exception types shared across the package."""


class GridSlamError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatch(GridSlamError):
    """Array arguments have incompatible shapes."""


class NonScalarOutput(GridSlamError):
    """Backward pass was requested from a non-scalar value."""


class AngleNearPi(GridSlamError):
    """Rotation logarithm requested too close to the pi singularity."""


class OutOfBounds(GridSlamError):
    """Query point lies outside a grid's bounding box."""


class FormatVersionMismatch(GridSlamError):
    """Binary file carries an unsupported format version."""


class IoError(GridSlamError):
    """A file could not be parsed (truncation, bad field, bad header)."""


class EmptyObservations(GridSlamError):
    """An optimization problem was built with no usable observations."""


class TooFewPoints(GridSlamError):
    """Not enough points survived filtering to run tracking."""


class MissingEncoderWeights(GridSlamError):
    """Encoder weights were requested for a level that has none."""


class MissingDecoder(GridSlamError):
    """An operation needs a decoder but none was supplied."""


class InsufficientScenes(GridSlamError):
    """Decoder pretraining needs at least two scenes."""


class EmptyGraph(GridSlamError):
    """A submap graph operation was invoked on an empty graph."""


class Uncovered(GridSlamError):
    """A fused-field query point is inside no submap's bounding box."""


class EmptySet(GridSlamError):
    """A metric was requested over an empty point set."""


class LengthMismatch(GridSlamError):
    """Paired sequences have different lengths."""


class SensorInsideSurface(GridSlamError):
    """A ray origin starts inside geometry, so depth is undefined."""
