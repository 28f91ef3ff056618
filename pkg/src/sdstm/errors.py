"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Plain ValueError is reserved for programmer-level
contract violations (wrong shapes passed between internal layers).
"""


class SDSTMError(Exception):
    pass


class ConfigError(SDSTMError):
    """Invalid or inconsistent run configuration."""


class DataError(SDSTMError):
    """Unusable dataset, graph file, or split request."""


class NumericError(SDSTMError):
    """Numerical failure: non-finite values, solver breakdown."""
