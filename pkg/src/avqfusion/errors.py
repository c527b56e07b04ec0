"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4), so new
error sites should raise the most specific class that applies.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad hyperparameters, head counts, rates, paths."""


class ShapeError(ConfigError):
    """Operands with incompatible dimensions. Message names both shapes."""


class DataError(ValueError):
    """Malformed or out-of-contract data: parse failures, wrong arities,
    non-finite values, out-of-range scores."""


class NumericError(ArithmeticError):
    """Numerical failure at run time, e.g. a non-finite training loss."""
