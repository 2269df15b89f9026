"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration values."""


class CheckpointFormatError(IOError):
    """Checkpoint file is malformed, truncated, or of an unknown version."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class InfeasibleBudgetError(ConfigurationError):
    """Activation budget below the minimum feasible total."""
