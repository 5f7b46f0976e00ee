"""Exception types raised across the package."""


class HypertrajError(Exception):
    """Base class for all package errors."""


class TrackTooShort(HypertrajError):
    pass


class UnknownAgent(HypertrajError, KeyError):
    pass


class ShapeMismatch(HypertrajError, ValueError):
    pass


class InvalidS(HypertrajError, ValueError):
    pass


class NoGroundTruth(HypertrajError, ValueError):
    pass


class MissingComponent(HypertrajError, KeyError):
    pass


class CheckpointStageMismatch(HypertrajError):
    pass


class EmptyPrediction(HypertrajError, ValueError):
    pass


class EmptyBatch(HypertrajError, ValueError):
    pass


class InvalidSpec(HypertrajError, ValueError):
    pass


class MalformedCsv(HypertrajError, ValueError):
    pass


class TooShort(HypertrajError, ValueError):
    pass


class SchemaViolation(HypertrajError, ValueError):
    pass


class DegenerateTrajectory(HypertrajError, ValueError):
    pass


class NonFiniteCost(HypertrajError, FloatingPointError):
    pass


class ConfigError(HypertrajError, ValueError):
    """Invalid or unknown configuration values."""
