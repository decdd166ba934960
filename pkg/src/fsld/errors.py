"""Exception types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Unreadable or corrupt data file (CLI exit code 3)."""


class NumericalError(RuntimeError):
    """Numerical breakdown: line-search cap or non-convergence (exit code 4)."""
