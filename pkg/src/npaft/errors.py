"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericError -> 3,
ConfigError -> 4.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, schemas, shapes)."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter values."""


class NumericError(RuntimeError):
    """Numerical failure: non-convergence, non-finite state, degenerate input."""
