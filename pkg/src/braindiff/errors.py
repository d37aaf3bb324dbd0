"""Shared exception types."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class DimensionError(ValidationError):
    """Array shapes or counts are inconsistent with the atlas/model."""


class ConfigError(ValidationError):
    """Experiment configuration is invalid or references missing files."""


class CheckpointError(ValidationError):
    """Checkpoint file is missing, corrupted, or incompatible."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss or activations."""
