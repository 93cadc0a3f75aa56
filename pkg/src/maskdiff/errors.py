"""Exception types shared across the pipeline."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class ShapeError(ValueError):
    """Tensor or image dimensions violate a contract."""


class InputError(ValueError):
    """Input data unusable for the requested operation."""


class StartupError(RuntimeError):
    """A required artifact (checkpoint, dataset) is missing or unreadable."""


class TrainingFault(RuntimeError):
    """Training produced a non-finite value."""
