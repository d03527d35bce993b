class ConfigError(ValueError):
    """Inconsistent or unparseable configuration."""


class ValidationError(ValueError):
    """Input data violates an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
