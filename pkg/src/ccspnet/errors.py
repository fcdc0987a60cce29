"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when parameters or configs are inconsistent with each other."""


class InputError(ValueError):
    """Raised when a caller passes data that violates an operation's preconditions."""
