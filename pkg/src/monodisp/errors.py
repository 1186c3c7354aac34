"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Raised when an array argument has the wrong shape, size or value range."""


class ConfigError(ValueError):
    """Raised for unusable network or run configurations."""


class InvalidSpecError(ValueError):
    """Raised by the synthetic scene generator for malformed scene descriptions."""


class IngestionError(OSError):
    """Raised when a dataset file is missing or cannot be decoded."""


class CalibrationParseError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


class EmptyReportError(ValueError):
    """Raised when a metric is requested over an empty set of valid pixels."""
