"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid."""


class IngestionError(RuntimeError):
    """A dataset on disk could not be read or failed validation."""


class FingerprintMismatchError(RuntimeError):
    """Artifacts built against different datasets/tables were combined."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
