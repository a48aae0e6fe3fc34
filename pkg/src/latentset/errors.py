"""Exception types shared across the package."""


class LatentSetError(Exception):
    """Base class for all library errors."""


class ShapeError(LatentSetError):
    """Operands have incompatible or disallowed shapes."""


class NonFiniteError(LatentSetError):
    """A computation produced NaN or Inf, which is an error state."""


class NoEvidenceError(LatentSetError):
    """A record/view has no observed modality to condition on."""


class ConfigError(LatentSetError):
    """Run configuration failed schema validation."""


class DataError(LatentSetError):
    """Dataset file or record content is invalid."""


class CheckpointError(LatentSetError):
    """Checkpoint is missing, corrupt, or incompatible with the config."""
