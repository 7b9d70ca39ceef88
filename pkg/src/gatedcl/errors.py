"""Exception types shared across the package."""


class GatedCLError(Exception):
    """Base class for all package errors."""


class ConfigError(GatedCLError):
    """Invalid configuration value or combination."""


class GatingError(GatedCLError):
    """Malformed gate inputs: dimension mismatch, non-finite values."""


class ConsolidationError(GatedCLError):
    """Invalid consolidation request (double consolidation, empty val set)."""


class CapacitySaturationError(GatedCLError):
    """A layer has no free kernels left for a new task."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DivergenceError(GatedCLError):
    """Training produced a non-finite loss."""


class DataError(GatedCLError):
    """Malformed dataset files or impossible stream construction."""


class CheckpointError(GatedCLError):
    """Unreadable, corrupted, or version-incompatible checkpoint."""


class ReplayError(GatedCLError):
    """Invalid episodic-buffer operation."""
