"""Exception types shared across the library."""


class CropStressError(Exception):
    """Base class for all library errors."""


class DimensionError(CropStressError):
    """Shape or axis mismatch between tensors."""


class NumericError(CropStressError):
    """A computation produced NaN/Inf or otherwise broke down numerically."""


class ContractError(CropStressError):
    """An API was called in a way its contract forbids."""


class ConfigError(CropStressError):
    """Invalid configuration values."""


class ValidationError(CropStressError):
    """Data content failed validation (labels, boxes, manifests)."""


class AnnotationParseError(CropStressError):
    """Annotation XML could not be parsed."""


class UninitializedStatisticsError(CropStressError):
    """Inference-mode normalization requested before any statistics were accumulated."""


class FormatError(CropStressError):
    """A serialized file does not match the expected binary/JSON layout."""
