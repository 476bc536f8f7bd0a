"""Exception types raised across the package."""


class RangeDiffError(Exception):
    """Base class for every error raised by rangediff."""


class ZeroDepth(RangeDiffError, ValueError):
    pass


class OutOfRange(RangeDiffError, ValueError):
    pass


class InvalidParams(RangeDiffError, ValueError):
    pass


class NonDivisibleFactor(RangeDiffError, ValueError):
    pass


class AllBehindCamera(RangeDiffError, ValueError):
    pass


class EmptyBox(RangeDiffError, ValueError):
    pass


class DegenerateBox(RangeDiffError, ValueError):
    pass


class InvalidRange(RangeDiffError, ValueError):
    pass


class DimensionMismatch(RangeDiffError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class SizeMismatch(DimensionMismatch):
    pass


class InvalidStepPair(RangeDiffError, ValueError):
    pass


class InvalidStride(RangeDiffError, ValueError):
    pass


class OddDim(RangeDiffError, ValueError):
    pass


class EmptyMask(RangeDiffError, ValueError):
    pass


class TooFewSamples(RangeDiffError, ValueError):
    pass


class ConfigError(RangeDiffError, ValueError):
    pass


class FormatError(RangeDiffError, ValueError):
    """A file did not match its documented binary or text layout."""
