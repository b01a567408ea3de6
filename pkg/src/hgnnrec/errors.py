"""Exception types; the CLI maps each to its exit code."""


class ConfigError(ValueError):
    """Invalid hyperparameter, flag or config-file value."""


class DataError(ValueError):
    """Malformed or insufficient input data."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared in parameters, activations or gradients."""
