"""
Exception hierarchy shared by every stage of the segmentation pipeline
"""

from typing import Tuple


class SegmentationError(Exception):
    """Base class for all errors raised by acseg"""

    exit_code: int = 3


class ConfigError(SegmentationError):
    """Invalid command line usage or configuration"""

    exit_code = 1


class DataError(SegmentationError):
    """Input data cannot be processed"""

    exit_code = 2


class UnknownColor(DataError):
    def __init__(self, x: int, y: int, rgb: Tuple[int, int, int]):
        self.x, self.y, self.rgb = x, y, tuple(int(v) for v in rgb)
        super().__init__(f"Unknown label color {self.rgb} at pixel ({x}, {y})")


class ImageTooSmall(DataError):
    pass


class InsufficientPoints(DataError):
    pass


class TooFewPoints(DataError):
    pass


class TooFewItems(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class FingerprintMismatch(DimensionMismatch):
    pass


class ShapeMismatch(DataError):
    pass


class MissingPair(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class DegenerateDifferences(DataError):
    pass


class SpecInfeasible(DataError):
    pass


class ModelFormatError(DataError):
    pass


class InvariantViolation(SegmentationError):
    """An internal consistency check failed"""

    exit_code = 3
