"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so keep the split between
configuration, data ingestion, solver, selection and inference errors.
"""


class QuantfuseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(QuantfuseError):
    """Invalid or inconsistent run configuration."""


class DataError(QuantfuseError):
    """Malformed or unusable input data (unbalanced panel, bad CSV, ...)."""


class SolverDivergenceError(QuantfuseError):
    """Non-finite values encountered inside the ADMM iterations."""

    def __init__(self, message, outer_iter=None, inner_iter=None):
        super().__init__(message)
        self.outer_iter = outer_iter
        self.inner_iter = inner_iter


class SelectionError(QuantfuseError):
    """Model selection could not produce an admissible solution."""


class InferenceError(QuantfuseError):
    """Variance estimation failed (e.g. singular within-group design)."""
