"""
Error types raised across the EdgeRec modules.

Every failure named in a module contract has its own class so callers (and the
management commands) can tell a configuration mistake from a model/version skew
or a degenerate metric.
"""


class EdgeRecError(Exception):
    """Base class for all EdgeRec errors."""
    pass


class ConfigError(EdgeRecError):
    """Invalid, unknown or non-positive configuration value."""
    pass


class FeatureEncodingError(EdgeRecError):
    """Raised when a raw feature cannot be encoded (non-finite value, bad index)."""
    pass


class EmbeddingLookupError(EdgeRecError):
    """A required embedding row is missing: vocabulary or version mismatch."""
    pass


class DimensionMismatchError(EdgeRecError):
    """Tensor widths disagree with the model they are fed to."""
    pass


class NonFiniteError(EdgeRecError):
    """NaN or Inf detected in a named tensor."""

    def __init__(self, tensor_name, message=None):
        self.tensor_name = tensor_name
        super().__init__(message or f"Non-finite values in tensor '{tensor_name}'")


class BehaviorOrderError(EdgeRecError):
    """Behavior records out of time order, or a page view without a prior exposure."""
    pass


class EmptyCandidatesError(EdgeRecError):
    """A candidate list was empty where at least one item is required."""
    pass


class UnknownItemError(EdgeRecError):
    """An edge event referenced an item that is not in the page cache."""
    pass


class UnknownUserError(EdgeRecError):
    """The cloud was asked to page for a user it never registered."""
    pass


class UnknownVariantError(EdgeRecError):
    """Model variant name not recognised."""
    pass


class VersionConflictError(EdgeRecError):
    """Duplicate or non-increasing model version id."""
    pass


class TrainingDivergedError(EdgeRecError):
    """Loss or gradients became non-finite during training."""
    pass


class UndefinedMetricError(EdgeRecError):
    """A metric has no defined value for the given input (e.g. one-class AUC)."""
    pass


class MalformedLogError(EdgeRecError):
    """A session log line could not be parsed or validated."""
    pass
