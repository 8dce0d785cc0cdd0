"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment or environment configuration."""


class UsageError(ValueError):
    """An operation was called outside its contract (bad shapes, wrong order)."""


class InvariantViolation(AssertionError):
    """A numerical identity the framework relies on did not hold."""
