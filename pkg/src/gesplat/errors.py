"""Exception hierarchy shared by every module."""


class GesplatError(Exception):
    """Base class for all package errors."""


class GeometryError(GesplatError, ValueError):
    pass


class PointBehindCamera(GeometryError):
    pass


class CoincidentCameras(GeometryError):
    pass


class DegenerateLine(GeometryError):
    pass


class EpipoleAtInfinity(GeometryError):
    pass


class ParallelRays(GeometryError):
    pass


class NegativeDepth(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class OutOfBounds(GesplatError, ValueError):
    pass


class EmptyInput(GesplatError, ValueError):
    pass


class ShapeMismatch(GesplatError, ValueError):
    pass


class TooFewPoints(GesplatError, ValueError):
    pass


class SkippedAllTerms(GesplatError, ValueError):
    pass


class NoValidPixels(GesplatError, ValueError):
    pass


class EmptySplit(GesplatError, ValueError):
    pass


class ConfigError(GesplatError, ValueError):
    pass


class DataError(GesplatError):
    """Missing or corrupt bundle files."""


class DivergenceError(GesplatError, FloatingPointError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
