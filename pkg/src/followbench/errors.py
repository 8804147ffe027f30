"""Exception types shared across the toolkit."""


class FollowBenchError(Exception):
    """Base class for all toolkit errors."""


class TrackDataError(FollowBenchError):
    """Raised for malformed or inconsistent trajectory input."""


class EventDataError(FollowBenchError):
    """Raised when a car-following event violates its invariants."""


class ModelEvaluationError(FollowBenchError):
    """Raised when a policy produces an unusable (non-finite) acceleration."""


class SynthesisError(FollowBenchError):
    """Raised when the synthetic-event generator cannot produce a valid event."""


class TrainingDivergedError(FollowBenchError):
    """Raised when an optimizer drives the loss to a non-finite value."""


class ConfigError(FollowBenchError):
    """Raised for invalid run configuration (bad paths, bad values)."""
