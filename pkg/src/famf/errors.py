"""Exception types shared across the package."""


class FamfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FamfError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FamfError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class EmptyInputError(FamfError, ValueError):
    """An aggregation received zero input features."""


class BatchSizeError(FamfError, ValueError):
    """Batch statistics requested on a batch that is too small."""


class DataFormatError(FamfError, ValueError):
    """A feature file or manifest failed to parse or validate."""


class ConfigError(FamfError, ValueError):
    """A run configuration failed schema validation."""


class CheckpointMismatchError(FamfError, ValueError):
    """Checkpoint fingerprint does not match the supplied configuration."""
