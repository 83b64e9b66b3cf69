"""Exception hierarchy shared by every radarflow module."""


class RadarFlowError(Exception):
    """Base class for all radarflow errors."""


# geometry
class OutOfBounds(RadarFlowError, ValueError):
    pass


class NonPositiveDepth(RadarFlowError, ValueError):
    pass


class BehindCamera(RadarFlowError, ValueError):
    pass


class ZeroNorm(RadarFlowError, ValueError):
    pass


class DimensionMismatch(RadarFlowError, ValueError):
    pass


# ego motion
class TooFewPoints(RadarFlowError, ValueError):
    pass


class NoConsensus(RadarFlowError):
    pass


# scale recovery
class DegeneratePlane(RadarFlowError, ValueError):
    pass


class UnstableDenominator(RadarFlowError, ValueError):
    pass


class NonPositiveScale(RadarFlowError, ValueError):
    pass


class NoStaticPoints(RadarFlowError):
    pass


class NoValidSamples(RadarFlowError):
    pass


# scene flow / deformation
class NoDynamicRadarPoints(RadarFlowError):
    pass


class MissingRadialVelocity(RadarFlowError, ValueError):
    pass


class SampleAtRadarOrigin(RadarFlowError, ValueError):
    pass


class NonFiniteLoss(RadarFlowError, FloatingPointError):
    pass


class DegenerateCorrespondences(RadarFlowError, ValueError):
    pass


# simulator / evaluation / config
class InvalidConfig(RadarFlowError, ValueError):
    pass


class LengthMismatch(RadarFlowError, ValueError):
    pass


# file formats
class FormatError(RadarFlowError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicTimestamps(FormatError):
    pass
