"""Exception types shared across the package.

The CLI maps these onto exit codes: validation-style errors exit 1,
I/O problems exit 2.
"""


class FrmdError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FrmdError):
    """Invalid configuration value or unknown configuration key."""


class LayoutError(FrmdError):
    """Array shape inconsistent with a declared layout."""


class NumericalError(FrmdError):
    """A numerical operation produced non-finite or singular results."""


class TrainingError(FrmdError):
    """Training diverged or received non-finite gradients."""


class CheckpointError(FrmdError):
    """Checkpoint file is malformed, corrupted, or incompatible."""


class ReportError(FrmdError):
    """Evaluation runs cannot be aggregated into a single report."""
