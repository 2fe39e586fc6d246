"""Exception types raised by the patchcount package."""


class PatchCountError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(PatchCountError):
    """Dataset manifest is missing, unreadable, or malformed."""


class ValidationError(PatchCountError):
    """An input value violates a documented precondition."""


class ConfigError(PatchCountError):
    """Configuration file or override is invalid."""


class CheckpointError(PatchCountError):
    """Checkpoint file is missing, corrupt, or incompatible."""


class SamplingError(PatchCountError):
    """Training patches cannot be sampled from the given records."""


class GenerationError(PatchCountError):
    """Synthetic data generation was asked for something unsatisfiable."""


class DivergenceError(PatchCountError):
    """Training loss became non-finite."""
