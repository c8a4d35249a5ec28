"""Exception types shared across the package.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2,
TrainingFault -> 3, verification failures -> 1.
"""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or violates a constraint."""


class DataFormatError(ValueError):
    """A data file (CSV, schema, tensor blob) is malformed."""


class TrainingFault(RuntimeError):
    """Training produced a non-finite value or hit an unrecoverable state."""


class GradCheckError(RuntimeError):
    """Finite-difference verification could not be evaluated (non-finite values)."""
