
class DrrelError(Exception):
    """Base class of every error raised by drrel."""
    pass


class ConfigError(DrrelError):
    """Configuration is missing, malformed or semantically invalid."""
    pass


class DomainError(DrrelError, ValueError):
    """An argument lies outside the domain of the operation."""
    pass


class EmptyDataError(DrrelError):
    """An estimator was asked for a value over zero interactions."""
    pass


class PropensityError(DrrelError):
    """An observed position has a zero examination propensity."""
    pass


class AlignmentError(DrrelError):
    """Two sequences that must be aligned one-to-one have different lengths."""
    pass


class CoverageError(DrrelError):
    """Randomized logs do not cover every position needed for a ratio."""
    pass


class DimensionError(DrrelError):
    """An input vector does not match the layer it is fed into."""
    pass


class StaleCacheError(DrrelError):
    """A forward cache was produced before the last parameter update."""
    pass


class DivergenceError(DrrelError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss=None):
        self.step = step
        self.loss = loss
        super().__init__('training diverged at step {} (loss={})'.format(step, loss))


class DegenerateDataError(DrrelError):
    """Training data has a single class, so no discriminative model exists."""
    pass


class SchemaError(DrrelError):
    """A serialized object declares a schema this version cannot read."""
    pass


class FrozenParameterError(DrrelError):
    """Parameters of a frozen model were changed."""
    pass


class PairingError(DrrelError):
    """Two ranking sets compared side by side cover different queries."""
    pass


class ArtifactError(DrrelError):
    """Base class for pipeline artifact problems."""
    pass


class StaleArtifactError(ArtifactError):
    """An artifact was produced under a different configuration or schema."""
    pass


class MissingArtifactError(StaleArtifactError):
    """An upstream artifact does not exist yet."""

    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__('{} not found, run the `{}` stage first'.format(path, stage))


class AcceptanceError(DrrelError):
    """A verification check failed in CI mode."""
    pass


class ScheduleError(DrrelError):
    """Base schedule exception"""
    pass


class ScheduleValueError(ScheduleError):
    """Base schedule value error"""
    pass
